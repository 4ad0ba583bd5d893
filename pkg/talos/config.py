"""Configuration schemas."""

from __future__ import annotations

from typing import Any

import voluptuous as vol

from .const import (
    CONF_ACTION,
    CONF_CERTIFICATE,
    CONF_EXPECTED_SERVICE,
    CONF_HOOKS,
    CONF_INDEX,
    CONF_LISTEN,
    CONF_MESSAGE,
    CONF_NAME,
    CONF_NODE_ID,
    CONF_OFFSET,
    CONF_ORCHESTRATOR_KEY,
    CONF_PAYLOAD,
    CONF_PROVISIONED,
    CONF_REGISTRY_MODE,
    CONF_RETARGET,
    CONF_SEED,
    CONF_SESSION,
    CONF_TRUSTED_PLATFORMS,
    CONF_XOR,
    DEFAULT_LISTEN,
    DEFAULT_ORCHESTRATOR_LISTEN,
    DEFAULT_REGISTRY_MODE,
    DEFAULT_SEED,
    NODE_ID_PATTERN,
    REGISTRY_MODES,
)
from .exceptions import ConfigError

HOOK_ACTIONS = ("record", "replay", "mutate", "inject", "duplicate", "drop")
HOOK_MESSAGES = (
    "any",
    "challenge",
    "channel-key",
    "state-package",
    "attestation-digest",
    "verification-result",
    "abort",
)


def parse_address(value: Any) -> tuple[str, int]:
    """Split ``host:port`` into its parts."""
    if not isinstance(value, str) or ":" not in value:
        raise vol.Invalid(f"expected host:port, got {value!r}")
    host, _, port_text = value.rpartition(":")
    try:
        port = int(port_text)
    except ValueError as err:
        raise vol.Invalid(f"invalid port in {value!r}") from err
    if not host or not 0 <= port < 65536:
        raise vol.Invalid(f"invalid address {value!r}")
    return host, port


def address(value: Any) -> str:
    """Validate a ``host:port`` string."""
    parse_address(value)
    return value


def hex_bytes(size: int | None = None) -> Any:
    """Return a validator for hex strings, optionally of a fixed byte size."""

    def validate(value: Any) -> str:
        if not isinstance(value, str):
            raise vol.Invalid("expected a hex string")
        try:
            raw = bytes.fromhex(value)
        except ValueError as err:
            raise vol.Invalid(f"invalid hex: {value!r}") from err
        if size is not None and len(raw) != size:
            raise vol.Invalid(f"expected {size} bytes, got {len(raw)}")
        return value.lower()

    return validate


NODE_ID = vol.All(str, vol.Match(NODE_ID_PATTERN))

NODE_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_NODE_ID): NODE_ID,
        vol.Optional(CONF_REGISTRY_MODE, default=DEFAULT_REGISTRY_MODE): vol.In(
            sorted(REGISTRY_MODES)
        ),
        vol.Optional(CONF_LISTEN, default=DEFAULT_LISTEN): address,
        vol.Optional(CONF_PROVISIONED, default=list): [hex_bytes(32)],
        vol.Optional(CONF_CERTIFICATE): hex_bytes(),
        vol.Optional(CONF_ORCHESTRATOR_KEY): hex_bytes(33),
    }
)

ORCHESTRATOR_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_LISTEN, default=DEFAULT_ORCHESTRATOR_LISTEN): address,
        vol.Optional(CONF_EXPECTED_SERVICE): hex_bytes(32),
        vol.Optional(CONF_TRUSTED_PLATFORMS, default=list): [hex_bytes(33)],
    }
)

HOOK_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_ACTION): vol.In(HOOK_ACTIONS),
        vol.Optional(CONF_MESSAGE, default="any"): vol.In(HOOK_MESSAGES),
        vol.Optional(CONF_SESSION): vol.All(int, vol.Range(min=0)),
        vol.Optional(CONF_OFFSET): vol.All(int, vol.Range(min=0)),
        vol.Optional(CONF_XOR, default=1): vol.All(int, vol.Range(min=1, max=255)),
        vol.Optional(CONF_INDEX, default=0): vol.All(int, vol.Range(min=0)),
        vol.Optional(CONF_PAYLOAD): hex_bytes(),
        vol.Optional(CONF_RETARGET, default=False): bool,
    }
)

ADVERSARY_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_NAME, default="custom"): str,
        vol.Optional(CONF_SEED, default=DEFAULT_SEED): vol.All(int, vol.Range(min=0)),
        vol.Required(CONF_HOOKS): [HOOK_SCHEMA],
    }
)


def validate(schema: vol.Schema, data: Any, what: str) -> dict[str, Any]:
    """Validate data against schema, raising ConfigError."""
    try:
        return schema(data)
    except vol.Invalid as err:
        raise ConfigError(f"invalid {what}: {err}") from err

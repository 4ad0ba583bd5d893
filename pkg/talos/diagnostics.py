"""Diagnostics for a migration node."""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from .node import MigrationNode

REDACTED = "**REDACTED**"

TO_REDACT_NODE = {"platform_id", "listen"}
TO_REDACT_CERTIFICATE = {"orchestrator_signature"}
TO_REDACT_REGISTRY = {"session_id"}


def redact_data(data: Mapping[str, Any], to_redact: Iterable[str]) -> dict[str, Any]:
    """Return a copy of data with the listed keys masked, recursing into dicts."""
    keys = set(to_redact)
    redacted: dict[str, Any] = {}
    for key, value in data.items():
        if key in keys and value is not None:
            redacted[key] = REDACTED
        elif isinstance(value, Mapping):
            redacted[key] = redact_data(value, keys)
        else:
            redacted[key] = value
    return redacted


def get_node_diagnostics(node: MigrationNode) -> dict[str, Any]:
    """Return a redacted status dump of a node."""
    config = node.config
    certificate = config.certificate
    return {
        "node": redact_data(
            {
                "node_id": node.node_id,
                "registry_mode": config.registry_mode,
                "listen": config.listen,
                "enrolled": node.enrolled,
                "public_key": node.keypair.public_bytes().hex(),
                "platform_id": node.tee.platform_id.hex(),
                "orchestrator_public_key": (
                    node.orchestrator_key.hex() if node.orchestrator_key else None
                ),
            },
            TO_REDACT_NODE,
        ),
        "certificate": (
            redact_data(
                {
                    "subject_node_id": certificate.subject_node_id,
                    "subject_public_key": certificate.subject_public_key.hex(),
                    "issued_at": certificate.issued_at,
                    "orchestrator_signature": certificate.orchestrator_signature.hex(),
                },
                TO_REDACT_CERTIFICATE,
            )
            if certificate is not None
            else None
        ),
        "registry": {
            measurement.hex(): redact_data(
                {
                    "status": str(entry.status),
                    "session_id": entry.session_id.hex() if entry.session_id else None,
                    "updated_at": entry.updated_at,
                },
                TO_REDACT_REGISTRY,
            )
            for measurement, entry in node.registry.snapshot().items()
        },
        "profiles": {
            measurement.hex(): {
                "resume_marker": profile.resume_marker,
                "graph_nodes": len(profile.reference_graph.nodes),
                "graph_edges": len(profile.reference_graph.edges),
            }
            for measurement, profile in node.profiles.items()
        },
        "apps": {
            measurement.hex(): {
                "name": program.name,
                "running": (
                    measurement in node.guests and node.guests[measurement].is_running
                ),
                "sealed_state": measurement in node.sealed,
            }
            for measurement, program in node.programs.items()
        },
    }

"""Flat-file stores for nodes and the orchestrator."""

from __future__ import annotations

import json
import os
from pathlib import Path
import tempfile
from typing import Any

from .const import (
    ATTESTATION_KEY_FILE,
    LOGGER,
    NODE_CONFIG_FILE,
    NODE_KEY_FILE,
    NONCE_LOG_FILE,
    ORCHESTRATOR_CONFIG_FILE,
    ORCHESTRATOR_KEY_FILE,
    REGISTRY_JOURNAL_FILE,
    ROOT_SECRET_FILE,
    STORAGE_VERSION,
)
from .exceptions import StorageError

PROFILE_SUFFIX = ".profile"
RECORD_SUFFIX = ".record"
SEALED_SUFFIX = ".sealed"


def write_atomic(path: Path, data: bytes, mode: int = 0o644) -> None:
    """Replace path with data via a temporary file in the same directory."""
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.chmod(tmp, mode)
        os.replace(tmp, path)
    except OSError as err:
        raise StorageError(f"cannot write {path}: {err}") from err


def read_bytes(path: Path) -> bytes:
    """Read a stored file."""
    try:
        return path.read_bytes()
    except OSError as err:
        raise StorageError(f"cannot read {path}: {err}") from err


class JsonStore:
    """Versioned JSON document: ``{"version": n, "data": {...}}``."""

    def __init__(self, path: Path, version: int = STORAGE_VERSION) -> None:
        """Initialize the store."""
        self.path = path
        self.version = version

    def load(self) -> dict[str, Any] | None:
        """Return the stored data, or None if the file does not exist."""
        if not self.path.exists():
            return None
        try:
            document = json.loads(read_bytes(self.path))
        except json.JSONDecodeError as err:
            raise StorageError(f"{self.path} is not valid JSON") from err
        if not isinstance(document, dict) or "data" not in document:
            raise StorageError(f"{self.path} has no data section")
        if document.get("version") != self.version:
            raise StorageError(
                f"{self.path} is version {document.get('version')}, expected {self.version}"
            )
        return document["data"]

    def save(self, data: dict[str, Any]) -> None:
        """Write the data atomically."""
        payload = {"version": self.version, "data": data}
        write_atomic(self.path, json.dumps(payload, indent=2, sort_keys=True).encode())


class _Layout:
    def __init__(self, root: Path) -> None:
        self.root = root

    def ensure(self) -> None:
        """Create the directory tree."""
        for directory in self._directories():
            directory.mkdir(parents=True, exist_ok=True)

    def _directories(self) -> list[Path]:
        return [self.root]

    @property
    def profiles_dir(self) -> Path:
        """Return the profile directory."""
        return self.root / "profiles"

    def profile_path(self, measurement_hex: str) -> Path:
        """Return where a signed profile lives."""
        return self.profiles_dir / f"{measurement_hex}{PROFILE_SUFFIX}"

    def profile_blobs(self) -> dict[str, bytes]:
        """Return every stored profile keyed by measurement hex."""
        if not self.profiles_dir.is_dir():
            return {}
        return {
            path.name.removesuffix(PROFILE_SUFFIX): read_bytes(path)
            for path in sorted(self.profiles_dir.glob(f"*{PROFILE_SUFFIX}"))
        }


class NodeStore(_Layout):
    """Directory layout of a migration node."""

    def _directories(self) -> list[Path]:
        return [self.root, self.profiles_dir, self.apps_dir, self.sealed_dir]

    @property
    def config(self) -> JsonStore:
        """Return the node configuration document."""
        return JsonStore(self.root / NODE_CONFIG_FILE)

    @property
    def key_path(self) -> Path:
        """Return the node signing key file."""
        return self.root / NODE_KEY_FILE

    @property
    def attestation_key_path(self) -> Path:
        """Return the platform attestation key file."""
        return self.root / ATTESTATION_KEY_FILE

    @property
    def root_secret_path(self) -> Path:
        """Return the platform root secret file."""
        return self.root / ROOT_SECRET_FILE

    @property
    def journal_path(self) -> Path:
        """Return the registry journal."""
        return self.root / REGISTRY_JOURNAL_FILE

    @property
    def nonce_log_path(self) -> Path:
        """Return the issued-nonce log."""
        return self.root / NONCE_LOG_FILE

    @property
    def apps_dir(self) -> Path:
        """Return the installed application directory."""
        return self.root / "apps"

    @property
    def sealed_dir(self) -> Path:
        """Return the resealed-state directory."""
        return self.root / "sealed"

    def install_app(self, measurement_hex: str, name: str, elf: bytes, script: str) -> None:
        """Store an application's ELF, script and name."""
        write_atomic(self.apps_dir / f"{measurement_hex}.elf", elf)
        write_atomic(self.apps_dir / f"{measurement_hex}.script", script.encode())
        write_atomic(self.apps_dir / f"{measurement_hex}.name", name.encode())

    def installed_apps(self) -> list[tuple[str, str, bytes, str]]:
        """Return (measurement hex, name, elf, script) for each installed app."""
        apps = []
        if not self.apps_dir.is_dir():
            return apps
        for elf_path in sorted(self.apps_dir.glob("*.elf")):
            stem = elf_path.stem
            name_path = self.apps_dir / f"{stem}.name"
            apps.append(
                (
                    stem,
                    read_bytes(name_path).decode() if name_path.exists() else stem,
                    read_bytes(elf_path),
                    read_bytes(self.apps_dir / f"{stem}.script").decode(),
                )
            )
        return apps

    def sealed_path(self, measurement_hex: str) -> Path:
        """Return where the resealed state of an imported app lives."""
        return self.sealed_dir / f"{measurement_hex}{SEALED_SUFFIX}"

    def remove(self, path: Path) -> None:
        """Delete a stored file if present."""
        try:
            path.unlink(missing_ok=True)
        except OSError as err:
            LOGGER.warning("Could not remove %s: %s", path, err)


class OrchestratorStore(_Layout):
    """Directory layout of the orchestrator."""

    def _directories(self) -> list[Path]:
        return [self.root, self.nodes_dir, self.profiles_dir]

    @property
    def config(self) -> JsonStore:
        """Return the orchestrator configuration document."""
        return JsonStore(self.root / ORCHESTRATOR_CONFIG_FILE)

    @property
    def key_path(self) -> Path:
        """Return the orchestrator signing key file."""
        return self.root / ORCHESTRATOR_KEY_FILE

    @property
    def nodes_dir(self) -> Path:
        """Return the enrollment record directory."""
        return self.root / "nodes"

    def record_path(self, node_id: str) -> Path:
        """Return where a node's enrollment record lives."""
        return self.nodes_dir / f"{node_id}{RECORD_SUFFIX}"

    def record_blobs(self) -> dict[str, bytes]:
        """Return every enrollment record keyed by node id."""
        if not self.nodes_dir.is_dir():
            return {}
        return {
            path.name.removesuffix(RECORD_SUFFIX): read_bytes(path)
            for path in sorted(self.nodes_dir.glob(f"*{RECORD_SUFFIX}"))
        }

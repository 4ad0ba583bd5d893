"""Pigeonhole registry: at most one live instance per enclave measurement."""

from __future__ import annotations

from collections.abc import Callable, Iterable
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
import threading
import time

from .const import LOGGER, REGISTRY_MODE_STATIC, REGISTRY_MODES, SESSION_ID_SIZE
from .exceptions import (
    AlreadyActive,
    ConfigError,
    InvalidTransition,
    NotProvisioned,
    SessionMismatch,
    StorageError,
)
from .tee_sim import EnclaveMeasurement

JOURNAL_NONE = "-"


class InstanceState(StrEnum):
    """Operational status of a measurement on this node."""

    ACTIVE = "Active"
    MIGRATING_OUT = "MigratingOut"
    MIGRATING_IN = "MigratingIn"
    FINALIZED = "Finalized"


class Direction(StrEnum):
    """Side of a migration a node takes."""

    OUT = "Out"
    IN = "In"


@dataclass(frozen=True)
class InstanceStatus:
    """Registry entry for one measurement."""

    status: InstanceState
    session_id: bytes | None = None
    updated_at: int = 0

    @property
    def live(self) -> bool:
        """Return whether the entry blocks another instance."""
        return self.status is not InstanceState.FINALIZED


type TransitionListener = Callable[
    [EnclaveMeasurement, InstanceState | None, InstanceState | None, bytes | None], None
]


class PigeonholeRegistry:
    """Measurement to status map with atomic check-and-set transitions.

    Every mutation runs under one lock and is appended to the journal
    before listeners are told about it. Source entries move
    Active -> MigratingOut -> Finalized (or back to Active on abort);
    target entries move MigratingIn -> Active (or are released).
    """

    def __init__(
        self,
        mode: str,
        provisioned: Iterable[EnclaveMeasurement] = (),
        journal_path: Path | None = None,
    ) -> None:
        """Initialize the registry, replaying the journal if one exists."""
        if mode not in REGISTRY_MODES:
            raise ConfigError(f"unknown registry mode {mode!r}")
        self.mode = mode
        self.provisioned = frozenset(provisioned)
        if mode == REGISTRY_MODE_STATIC and not self.provisioned:
            raise ConfigError("static registry mode needs provisioned measurements")
        self._entries: dict[EnclaveMeasurement, InstanceStatus] = {}
        self._lock = threading.RLock()
        self._listeners: list[TransitionListener] = []
        self._journal_path = journal_path
        if journal_path is not None and journal_path.exists():
            self._replay(journal_path)

    def add_listener(self, listener: TransitionListener) -> Callable[[], None]:
        """Register a transition callback; returns a function removing it."""
        self._listeners.append(listener)
        return lambda: self._listeners.remove(listener)

    def _replay(self, path: Path) -> None:
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                ts, m_hex, _old, new, sid = line.split()
                measurement = EnclaveMeasurement.from_hex(m_hex)
                session_id = None if sid == JOURNAL_NONE else bytes.fromhex(sid)
                if new == JOURNAL_NONE:
                    self._entries.pop(measurement, None)
                else:
                    self._entries[measurement] = InstanceStatus(
                        InstanceState(new), session_id, int(ts)
                    )
            except ValueError as err:
                raise StorageError(f"{path}:{lineno}: bad journal line") from err
        for measurement, entry in self._entries.items():
            if entry.status in (InstanceState.MIGRATING_OUT, InstanceState.MIGRATING_IN):
                LOGGER.warning(
                    "Measurement %s left %s by an interrupted session",
                    measurement,
                    entry.status,
                )

    def _set(
        self,
        measurement: EnclaveMeasurement,
        new: InstanceState | None,
        session_id: bytes | None = None,
    ) -> None:
        old_entry = self._entries.get(measurement)
        old = old_entry.status if old_entry else None
        now = int(time.time())
        if new is None:
            self._entries.pop(measurement, None)
        else:
            self._entries[measurement] = InstanceStatus(new, session_id, now)
        if self._journal_path is not None:
            line = " ".join(
                (
                    str(now),
                    measurement.hex(),
                    old or JOURNAL_NONE,
                    new or JOURNAL_NONE,
                    session_id.hex() if session_id else JOURNAL_NONE,
                )
            )
            try:
                with self._journal_path.open("a") as journal:
                    journal.write(line + "\n")
            except OSError as err:
                raise StorageError(f"cannot append to {self._journal_path}: {err}") from err
        LOGGER.debug("Registry %s: %s -> %s", measurement, old, new)
        for listener in list(self._listeners):
            listener(measurement, old, new, session_id)

    def _check_session(
        self,
        measurement: EnclaveMeasurement,
        session_id: bytes,
        expected: InstanceState,
    ) -> None:
        entry = self._entries.get(measurement)
        if entry is None or entry.status is not expected:
            raise InvalidTransition(
                f"{measurement}: {entry.status if entry else 'absent'}, expected {expected}"
            )
        if entry.session_id != session_id:
            raise SessionMismatch(f"{measurement}: held by another session")

    def register_active(self, measurement: EnclaveMeasurement) -> None:
        """Record a freshly launched instance as Active."""
        with self._lock:
            if self.mode == REGISTRY_MODE_STATIC and measurement not in self.provisioned:
                raise NotProvisioned(str(measurement))
            entry = self._entries.get(measurement)
            if entry is not None and entry.live:
                raise AlreadyActive(f"{measurement} is {entry.status}")
            self._set(measurement, InstanceState.ACTIVE)

    def try_acquire_migration(
        self,
        measurement: EnclaveMeasurement,
        session_id: bytes,
        direction: Direction,
    ) -> bool:
        """Take the migration slot for measurement, or return False."""
        if len(session_id) != SESSION_ID_SIZE:
            return False
        with self._lock:
            entry = self._entries.get(measurement)
            if direction is Direction.OUT:
                if entry is None or entry.status is not InstanceState.ACTIVE:
                    return False
                self._set(measurement, InstanceState.MIGRATING_OUT, session_id)
                return True
            if entry is not None and entry.live:
                return False
            if self.mode == REGISTRY_MODE_STATIC and measurement not in self.provisioned:
                return False
            self._set(measurement, InstanceState.MIGRATING_IN, session_id)
            return True

    def mark_migrated(self, measurement: EnclaveMeasurement, session_id: bytes) -> None:
        """Finalize the source entry after a confirmed migration."""
        with self._lock:
            self._check_session(measurement, session_id, InstanceState.MIGRATING_OUT)
            self._set(measurement, InstanceState.FINALIZED, session_id)

    def activate_imported(self, measurement: EnclaveMeasurement, session_id: bytes) -> None:
        """Activate the target entry once the digest is dispatched."""
        with self._lock:
            self._check_session(measurement, session_id, InstanceState.MIGRATING_IN)
            self._set(measurement, InstanceState.ACTIVE)

    def restore(self, measurement: EnclaveMeasurement, session_id: bytes) -> None:
        """Return an aborted outgoing migration to Active."""
        with self._lock:
            self._check_session(measurement, session_id, InstanceState.MIGRATING_OUT)
            self._set(measurement, InstanceState.ACTIVE)

    def release(self, measurement: EnclaveMeasurement, session_id: bytes) -> None:
        """Drop an aborted incoming migration."""
        with self._lock:
            self._check_session(measurement, session_id, InstanceState.MIGRATING_IN)
            self._set(measurement, None)

    def retire(self, measurement: EnclaveMeasurement) -> None:
        """Finalize an Active entry whose instance was torn down."""
        with self._lock:
            entry = self._entries.get(measurement)
            if entry is None or entry.status is not InstanceState.ACTIVE:
                raise InvalidTransition(f"{measurement}: cannot retire")
            self._set(measurement, InstanceState.FINALIZED)

    def status(self, measurement: EnclaveMeasurement) -> InstanceStatus | None:
        """Return the entry for measurement."""
        with self._lock:
            return self._entries.get(measurement)

    def is_active(self, measurement: EnclaveMeasurement) -> bool:
        """Return whether measurement is Active here."""
        entry = self.status(measurement)
        return entry is not None and entry.status is InstanceState.ACTIVE

    def snapshot(self) -> dict[EnclaveMeasurement, InstanceStatus]:
        """Return a copy of all entries."""
        with self._lock:
            return dict(self._entries)

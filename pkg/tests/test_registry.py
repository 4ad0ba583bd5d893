"""Tests for the pigeonhole registry."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import pytest

from talos.exceptions import (
    AlreadyActive,
    ConfigError,
    InvalidTransition,
    NotProvisioned,
    SessionMismatch,
    StorageError,
)
from talos.registry import Direction, InstanceState, PigeonholeRegistry

from .conftest import MOCK_MEASUREMENT, MOCK_OTHER_MEASUREMENT, MOCK_OTHER_SESSION_ID, MOCK_SESSION_ID


def _state(registry: PigeonholeRegistry) -> InstanceState | None:
    entry = registry.status(MOCK_MEASUREMENT)
    return entry.status if entry else None


def test_register_active(registry: PigeonholeRegistry) -> None:
    """Test a measurement can be active only once."""
    registry.register_active(MOCK_MEASUREMENT)
    assert registry.is_active(MOCK_MEASUREMENT)
    with pytest.raises(AlreadyActive):
        registry.register_active(MOCK_MEASUREMENT)
    registry.register_active(MOCK_OTHER_MEASUREMENT)


def test_static_mode() -> None:
    """Test static registries only admit provisioned measurements."""
    with pytest.raises(ConfigError):
        PigeonholeRegistry("static")
    with pytest.raises(ConfigError):
        PigeonholeRegistry("elastic")
    registry = PigeonholeRegistry("static", [MOCK_MEASUREMENT])
    registry.register_active(MOCK_MEASUREMENT)
    with pytest.raises(NotProvisioned):
        registry.register_active(MOCK_OTHER_MEASUREMENT)
    assert not registry.try_acquire_migration(MOCK_OTHER_MEASUREMENT, MOCK_SESSION_ID, Direction.IN)


def test_source_lifecycle(registry: PigeonholeRegistry) -> None:
    """Test Active to MigratingOut to Finalized, with abort back to Active."""
    registry.register_active(MOCK_MEASUREMENT)
    assert registry.try_acquire_migration(MOCK_MEASUREMENT, MOCK_SESSION_ID, Direction.OUT)
    assert _state(registry) is InstanceState.MIGRATING_OUT
    assert not registry.try_acquire_migration(MOCK_MEASUREMENT, MOCK_OTHER_SESSION_ID, Direction.OUT)
    registry.restore(MOCK_MEASUREMENT, MOCK_SESSION_ID)
    assert _state(registry) is InstanceState.ACTIVE

    assert registry.try_acquire_migration(MOCK_MEASUREMENT, MOCK_OTHER_SESSION_ID, Direction.OUT)
    with pytest.raises(SessionMismatch):
        registry.mark_migrated(MOCK_MEASUREMENT, MOCK_SESSION_ID)
    registry.mark_migrated(MOCK_MEASUREMENT, MOCK_OTHER_SESSION_ID)
    assert _state(registry) is InstanceState.FINALIZED
    with pytest.raises(InvalidTransition):
        registry.restore(MOCK_MEASUREMENT, MOCK_OTHER_SESSION_ID)


def test_target_lifecycle(registry: PigeonholeRegistry) -> None:
    """Test MigratingIn to Active, or release on abort."""
    assert registry.try_acquire_migration(MOCK_MEASUREMENT, MOCK_SESSION_ID, Direction.IN)
    assert not registry.try_acquire_migration(MOCK_MEASUREMENT, MOCK_OTHER_SESSION_ID, Direction.IN)
    registry.release(MOCK_MEASUREMENT, MOCK_SESSION_ID)
    assert registry.status(MOCK_MEASUREMENT) is None

    assert registry.try_acquire_migration(MOCK_MEASUREMENT, MOCK_SESSION_ID, Direction.IN)
    with pytest.raises(SessionMismatch):
        registry.activate_imported(MOCK_MEASUREMENT, MOCK_OTHER_SESSION_ID)
    registry.activate_imported(MOCK_MEASUREMENT, MOCK_SESSION_ID)
    assert registry.is_active(MOCK_MEASUREMENT)
    assert not registry.try_acquire_migration(MOCK_MEASUREMENT, MOCK_OTHER_SESSION_ID, Direction.IN)


def test_acquire_needs_active_source(registry: PigeonholeRegistry) -> None:
    """Test an absent or finalized measurement cannot migrate out."""
    assert not registry.try_acquire_migration(MOCK_MEASUREMENT, MOCK_SESSION_ID, Direction.OUT)
    registry.register_active(MOCK_MEASUREMENT)
    registry.retire(MOCK_MEASUREMENT)
    assert not registry.try_acquire_migration(MOCK_MEASUREMENT, MOCK_SESSION_ID, Direction.OUT)


def test_acquire_rejects_short_session(registry: PigeonholeRegistry) -> None:
    """Test session ids must be 16 bytes."""
    registry.register_active(MOCK_MEASUREMENT)
    assert not registry.try_acquire_migration(MOCK_MEASUREMENT, b"short", Direction.OUT)
    assert registry.is_active(MOCK_MEASUREMENT)


def test_concurrent_acquire(registry: PigeonholeRegistry) -> None:
    """Test exactly one of many concurrent imports wins the slot."""
    sessions = [index.to_bytes(16, "big") for index in range(100)]
    with ThreadPoolExecutor(max_workers=16) as pool:
        results = list(
            pool.map(
                lambda sid: registry.try_acquire_migration(MOCK_MEASUREMENT, sid, Direction.IN),
                sessions,
            )
        )
    assert results.count(True) == 1
    winner = sessions[results.index(True)]
    assert registry.status(MOCK_MEASUREMENT).session_id == winner


def test_listeners(registry: PigeonholeRegistry) -> None:
    """Test listeners see every transition until removed."""
    seen = []
    remove = registry.add_listener(lambda m, old, new, sid: seen.append((old, new)))
    registry.register_active(MOCK_MEASUREMENT)
    registry.try_acquire_migration(MOCK_MEASUREMENT, MOCK_SESSION_ID, Direction.OUT)
    remove()
    registry.restore(MOCK_MEASUREMENT, MOCK_SESSION_ID)
    assert seen == [
        (None, InstanceState.ACTIVE),
        (InstanceState.ACTIVE, InstanceState.MIGRATING_OUT),
    ]


def test_journal_replay(tmp_path: Path) -> None:
    """Test a registry rebuilt from its journal has the same entries."""
    journal = tmp_path / "registry.journal"
    registry = PigeonholeRegistry("dynamic", journal_path=journal)
    registry.register_active(MOCK_MEASUREMENT)
    registry.try_acquire_migration(MOCK_MEASUREMENT, MOCK_SESSION_ID, Direction.OUT)
    registry.try_acquire_migration(MOCK_OTHER_MEASUREMENT, MOCK_SESSION_ID, Direction.IN)
    registry.release(MOCK_OTHER_MEASUREMENT, MOCK_SESSION_ID)

    replayed = PigeonholeRegistry("dynamic", journal_path=journal)
    assert replayed.snapshot() == registry.snapshot()
    replayed.restore(MOCK_MEASUREMENT, MOCK_SESSION_ID)
    assert replayed.is_active(MOCK_MEASUREMENT)


def test_journal_corrupt(tmp_path: Path) -> None:
    """Test an unreadable journal raises StorageError."""
    journal = tmp_path / "registry.journal"
    journal.write_text("not a journal line\n")
    with pytest.raises(StorageError):
        PigeonholeRegistry("dynamic", journal_path=journal)

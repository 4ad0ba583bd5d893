"""Tests for the security games."""

from __future__ import annotations

import pytest

from talos.elf_introspect import PT_LOAD, Perm, extract_symbols, parse_elf
from talos.exceptions import FixtureInitFailure, HarnessError
from talos.harness import (
    Game,
    GameReport,
    Testbed,
    flip_segment_permission,
    load_program,
    rename_symbol,
    run_game,
)


def test_testbed_layout() -> None:
    """Test the app starts Active on the first node only."""
    bed = Testbed.create(2, nodes=3)
    assert [node.node_id for node in bed.nodes] == ["node-0", "node-1", "node-2"]
    assert bed.holder() is bed.nodes[0]
    assert bed.guest().pc == 8
    for node in bed.nodes[1:]:
        assert not node.registry.is_active(bed.measurement)
        assert node.profiles[bed.measurement] == bed.profile
    assert bed.other(bed.nodes[0]) is bed.nodes[1]


def test_testbed_state_size() -> None:
    """Test the heap is padded to the requested state size."""
    bed = Testbed.create(1, state_size=4096)
    assert len(bed.guest().snapshot().heap_image) == 4096


def test_testbed_unknown_scenario() -> None:
    """Test a missing fixture fails setup."""
    with pytest.raises(FixtureInitFailure):
        Testbed.create(9)


def test_holder_none() -> None:
    """Test holder raises once no node runs the app."""
    bed = Testbed.create(1)
    bed.nodes[0].guests[bed.measurement].pause()
    with pytest.raises(HarnessError):
        bed.holder()


def test_audit_records_double_active() -> None:
    """Test the auditor notices two Active registries."""
    bed = Testbed.create(1)
    bed.audit()
    assert bed.violations == []
    bed.nodes[1].registry.register_active(bed.measurement)
    bed.audit()
    assert bed.violations == ["node-0,node-1"]


def test_rename_symbol() -> None:
    """Test renaming changes one symbol name and nothing else."""
    raw = load_program(2).elf_bytes
    renamed = parse_elf(rename_symbol(raw))
    before = [s.name for s in extract_symbols(parse_elf(raw))]
    after = [s.name for s in extract_symbols(renamed)]
    assert len(before) == len(after)
    assert sum(a != b for a, b in zip(before, after, strict=True)) == 1
    with pytest.raises(HarnessError):
        rename_symbol(load_program(1).elf_bytes)


def test_flip_segment_permission() -> None:
    """Test the first loadable segment gains or loses its write bit."""
    raw = load_program(3).elf_bytes
    before = next(h for h in parse_elf(raw).program_headers if h.p_type == PT_LOAD)
    after = next(
        h for h in parse_elf(flip_segment_permission(raw)).program_headers if h.p_type == PT_LOAD
    )
    assert before.flags ^ after.flags == Perm.W


def test_report_rendering() -> None:
    """Test text and TSV renderings carry the counts."""
    report = GameReport(Game.III, trials=2)
    report.record(0, "clones=3", "acquired=1", won=False)
    report.record(1, "clones=3", "acquired=2", won=True)
    report.max_acquisitions = 2
    assert report.adversary_wins == 1
    assert report.control_confirmed
    text = report.to_text()
    assert "adversary wins:  1" in text
    assert "max acquisitions per trial: 2" in text
    lines = report.to_tsv().splitlines()
    assert lines[0] == "summary\tIII\t2\t1\t0\t0\t2"
    assert lines[2] == "trial\tIII\t1\tclones=3\tacquired=2\twin"


@pytest.mark.parametrize("game", list(Game))
def test_honest_runs_confirm(game: Game) -> None:
    """Test honest mode confirms every run."""
    report = run_game(game, trials=3, honest=True)
    assert report.adversary_wins == 0
    assert report.controls == 3
    assert report.control_confirmed


def test_game_replay() -> None:
    """Test replayed frames never complete a migration."""
    report = run_game(Game.I, trials=10, seed=1)
    assert report.adversary_wins == 0
    assert report.control_confirmed
    assert len(report.transcripts) == 10


def test_game_cloning() -> None:
    """Test unapproved services neither enroll nor receive state."""
    report = run_game(Game.II, trials=12, seed=2)
    assert report.adversary_wins == 0


def test_game_concurrent_clones() -> None:
    """Test only one of many simultaneous challenges acquires the app."""
    report = run_game(Game.III, trials=3, clones=6)
    assert report.adversary_wins == 0
    assert report.max_acquisitions == 1
    with pytest.raises(HarnessError):
        run_game(Game.III, trials=1, clones=1)


def test_game_integrity() -> None:
    """Test every bit flip in the package is detected."""
    report = run_game(Game.IV, trials=20, seed=4)
    assert report.adversary_wins == 0
    assert report.control_confirmed


@pytest.mark.slow
def test_game_integrity_full() -> None:
    """Test ten thousand bit flips in the package are all detected."""
    report = run_game(Game.IV, trials=10_000, seed=4)
    assert report.adversary_wins == 0
    assert report.control_confirmed


@pytest.mark.slow
def test_game_hundred_clones() -> None:
    """Test a hundred simultaneous clones let exactly one acquire the app."""
    report = run_game(Game.III, trials=1, clones=100)
    assert report.adversary_wins == 0
    assert report.max_acquisitions == 1


def test_game_application_integrity() -> None:
    """Test every tamper of the relaunched app is refused."""
    report = run_game(Game.V, trials=8)
    assert report.adversary_wins == 0
    assert report.controls == 3
    assert report.control_confirmed
    variants = {line.split("\t")[1] for line in report.transcripts}
    assert "scenario1/symbol-rename" not in variants
    assert "scenario2/symbol-rename" in variants
    assert "scenario3/extra-syscall-edge" in variants

"""Tests for the sub-step benchmark."""

from __future__ import annotations

import pytest

from talos.bench import BenchReport, StepStats, run_benchmark
from talos.exceptions import HarnessError
from talos.timing import StepTimer, SubStep, maybe_measure


def test_step_timer() -> None:
    """Test repeated measurements of a step accumulate."""
    timer = StepTimer()
    with timer.measure(SubStep.SC_CFI):
        pass
    first = timer.samples[SubStep.SC_CFI]
    with timer.measure(SubStep.SC_CFI):
        pass
    assert timer.samples[SubStep.SC_CFI] >= first >= 0.0
    with maybe_measure(None, SubStep.ELF_CONF):
        pass
    assert SubStep.ELF_CONF not in timer.samples


def test_step_stats() -> None:
    """Test summary statistics of a sample list."""
    stats = StepStats.from_samples(SubStep.MASK_STATE, [1.0, 2.0, 3.0])
    assert (stats.minimum, stats.maximum, stats.mean) == (1.0, 3.0, 2.0)
    assert stats.std == pytest.approx((2 / 3) ** 0.5)


def test_report_needs_every_step() -> None:
    """Test a timer missing a sub-step is refused."""
    report = BenchReport(1, 1)
    with pytest.raises(HarnessError):
        report.add(StepTimer({SubStep.VERIFY_TMN: 1.0}))


def test_run_benchmark() -> None:
    """Test every sub-step is timed on every iteration."""
    report = run_benchmark(1, iterations=3)
    assert [row.step for row in report.stats()] == list(SubStep)
    assert all(len(values) == 3 for values in report.samples.values())
    text = report.to_text()
    assert text.startswith("Scenario 1, 3 iterations\n")
    assert "SC-CFI" in text
    assert len(report.to_tsv().splitlines()) == len(SubStep)


def test_run_benchmark_state_size() -> None:
    """Test the state size is reported."""
    report = run_benchmark(2, iterations=1, state_size=1 << 16)
    assert "state size 65536 bytes" in report.to_text()
    with pytest.raises(HarnessError):
        run_benchmark(1, iterations=0)

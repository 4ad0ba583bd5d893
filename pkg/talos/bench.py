"""Phase breakdown benchmark over the scripted testbed."""

from __future__ import annotations

from dataclasses import dataclass, field
import statistics

from .const import DEFAULT_ITERATIONS, DEFAULT_SCENARIO, LOGGER
from .exceptions import HarnessError
from .harness import Testbed, describe
from .timing import StepTimer, SubStep


@dataclass(frozen=True)
class StepStats:
    """Summary of one sub-step in milliseconds."""

    step: SubStep
    minimum: float
    maximum: float
    mean: float
    std: float

    @classmethod
    def from_samples(cls, step: SubStep, samples: list[float]) -> StepStats:
        """Summarize samples."""
        return cls(
            step,
            min(samples),
            max(samples),
            statistics.fmean(samples),
            statistics.pstdev(samples),
        )


@dataclass
class BenchReport:
    """Per sub-step timings of repeated honest migrations."""

    scenario: int
    iterations: int
    state_size: int = 0
    samples: dict[SubStep, list[float]] = field(
        default_factory=lambda: {step: [] for step in SubStep}
    )

    def add(self, timer: StepTimer) -> None:
        """Add one migration's timings; every sub-step must be present."""
        missing = [step for step in SubStep if step not in timer.samples]
        if missing:
            raise HarnessError(f"sub-steps not measured: {', '.join(missing)}")
        for step in SubStep:
            self.samples[step].append(timer.samples[step])

    def stats(self) -> list[StepStats]:
        """Return the summary rows in report order."""
        return [
            StepStats.from_samples(step, values)
            for step, values in self.samples.items()
            if values
        ]

    def to_text(self) -> str:
        """Render the breakdown table."""
        lines = [
            f"Scenario {self.scenario}, {self.iterations} iterations"
            + (f", state size {self.state_size} bytes" if self.state_size else ""),
            f"{'Sub-step':<20}{'Min':>10}{'Max':>10}{'Mean':>10}{'std':>10}  (ms)",
        ]
        lines.extend(
            f"{row.step:<20}{row.minimum:>10.3f}{row.maximum:>10.3f}"
            f"{row.mean:>10.3f}{row.std:>10.3f}"
            for row in self.stats()
        )
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        """Render one tab-separated record per sub-step."""
        return "".join(
            f"bench\t{self.scenario}\t{row.step}\t{row.minimum:.6f}\t{row.maximum:.6f}"
            f"\t{row.mean:.6f}\t{row.std:.6f}\n"
            for row in self.stats()
        )


def run_benchmark(
    scenario: int = DEFAULT_SCENARIO,
    iterations: int = DEFAULT_ITERATIONS,
    *,
    state_size: int = 0,
) -> BenchReport:
    """Migrate a scenario's app back and forth, timing every sub-step."""
    if iterations < 1:
        raise HarnessError("need at least one iteration")
    bed = Testbed.create(scenario, state_size=state_size)
    for node in bed.nodes:
        node.timer_factory = StepTimer
    report = BenchReport(scenario, iterations, state_size)
    for iteration in range(iterations):
        result = bed.migrate()
        if not result.confirmed:
            raise HarnessError(f"iteration {iteration} did not confirm: {describe(result)}")
        merged = StepTimer()
        for session in (result.target_session, result.source_session):
            if session is not None and session.timer is not None:
                merged.samples.update(session.timer.samples)
        report.add(merged)
    LOGGER.info("Benchmarked scenario %d over %d iterations", scenario, iterations)
    return report

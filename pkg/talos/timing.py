"""Wall-clock timing of protocol sub-steps."""

from __future__ import annotations

from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import StrEnum
import time


class SubStep(StrEnum):
    """Timed sub-steps, in report order."""

    VERIFY_TMN = "Verify TMN"
    EXTRACT_APP_STATE = "Extract App. State"
    MASK_STATE = "Mask State"
    VERIFY_SMN = "Verify SMN"
    UNMASK_STATE = "UnMask State"
    DUMP_APP_STATE = "Dump App State"
    SC_CFI = "SC-CFI"
    ELF_CONF = "ELF Conf"


@dataclass
class StepTimer:
    """Accumulates elapsed milliseconds per sub-step."""

    samples: dict[SubStep, float] = field(default_factory=dict)

    @contextmanager
    def measure(self, step: SubStep) -> Iterator[None]:
        """Time the enclosed block and add it to step."""
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = (time.perf_counter() - start) * 1000.0
            self.samples[step] = self.samples.get(step, 0.0) + elapsed


@contextmanager
def maybe_measure(timer: StepTimer | None, step: SubStep) -> Iterator[None]:
    """Time the block when a timer is given."""
    if timer is None:
        yield
        return
    with timer.measure(step):
        yield

"""Scripted guest application migrated by the simulator.

A guest is an ELF fixture (its persistent identity) plus a line-oriented
script with three sections::

    [init]      run once on a fresh launch
    [reload]    run after launching with a restored state; ends with the marker
    [main]      stepped one command at a time, wrapping around

Commands::

    heap-write <offset> <hex>     stack-push <hex>       stack-pop <n>
    fd-open <fd> <path>           fd-seek <fd> <offset>  fd-close <fd>
    secret-set <hex>              counter-inc <id-hex16>
    syscall <name> [params-hex]   emit-resume-marker
    repeat <n> <command...>

Only ``syscall``, ``emit-resume-marker`` and ``repeat`` of those may
appear in ``[reload]``. The first 8 bytes of the stack image hold the
program counter into ``[main]``.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
from enum import StrEnum
import hashlib
from pathlib import Path
import threading

from .codec import lp, u64
from .const import (
    COUNTER_ID_SIZE,
    DEFAULT_RESUME_MARKER,
    LOGGER,
    MAX_HEAP_OFFSET,
    MAX_REPEAT,
)
from .elf_fixture import build_elf, parse_description
from .exceptions import GuestScriptError, InvalidRunState, MeasurementMismatch
from .sccfg import SysCallGraph, TraceLog, graph_from_trace, trace_record, trace_until_marker
from .state_manager import (
    EffectiveCounters,
    FdEntry,
    VolatileState,
    apply_counter_offsets,
    export_counter_offsets,
)
from .tee_sim import (
    CounterBank,
    EnclaveMeasurement,
    SignerMeasurement,
    TeeBackend,
    measure_enclave,
)

FIXTURES_DIR = Path(__file__).parent / "fixtures"
FIXTURE_ELF_SPEC = "app.elfspec"
FIXTURE_SCRIPT = "app.script"
DEFAULT_VENDOR = "talos-demo-vendor"
PC_SIZE = 8

SECTIONS = ("init", "reload", "main")
_RELOAD_COMMANDS = frozenset({"syscall", "emit-resume-marker"})
_ARITY: dict[str, tuple[int, int]] = {
    "heap-write": (2, 2),
    "stack-push": (1, 1),
    "stack-pop": (1, 1),
    "fd-open": (2, 2),
    "fd-seek": (2, 2),
    "fd-close": (1, 1),
    "secret-set": (1, 1),
    "counter-inc": (1, 1),
    "syscall": (1, 2),
    "emit-resume-marker": (0, 0),
}

type ImageLoader = Callable[[bytes], bytes]


class RunState(StrEnum):
    """Execution state of a guest instance."""

    RUNNING = "Running"
    PAUSED = "Paused"
    TERMINATED = "Terminated"


@dataclass(frozen=True)
class Command:
    """One parsed script command."""

    op: str
    args: tuple[str, ...] = ()
    lineno: int = 0


def _parse_int(token: str, lineno: int, limit: int | None = None) -> int:
    try:
        value = int(token, 0)
    except ValueError as err:
        raise GuestScriptError(f"line {lineno}: bad number {token!r}") from err
    if value < 0:
        raise GuestScriptError(f"line {lineno}: negative value {token!r}")
    if limit is not None and value > limit:
        raise GuestScriptError(f"line {lineno}: {token!r} exceeds {limit}")
    return value


def _parse_hex(token: str, lineno: int) -> bytes:
    try:
        return bytes.fromhex(token)
    except ValueError as err:
        raise GuestScriptError(f"line {lineno}: bad hex {token!r}") from err


def _parse_command(tokens: list[str], lineno: int, section: str) -> list[Command]:
    op, *args = tokens
    if op == "repeat":
        if len(args) < 2:
            raise GuestScriptError(f"line {lineno}: repeat needs a count and a command")
        count = _parse_int(args[0], lineno, MAX_REPEAT)
        body = _parse_command(args[1:], lineno, section)
        if len(body) * count > MAX_REPEAT:
            raise GuestScriptError(f"line {lineno}: repeat expands past {MAX_REPEAT} commands")
        return body * count
    if op not in _ARITY:
        raise GuestScriptError(f"line {lineno}: unknown command {op!r}")
    low, high = _ARITY[op]
    if not low <= len(args) <= high:
        raise GuestScriptError(f"line {lineno}: {op} takes {low}..{high} arguments")
    if section == "reload" and op not in _RELOAD_COMMANDS:
        raise GuestScriptError(f"line {lineno}: {op} not allowed in [reload]")
    # Validate operands now so execution never fails halfway.
    match op:
        case "heap-write":
            _parse_int(args[0], lineno, MAX_HEAP_OFFSET)
            _parse_hex(args[1], lineno)
        case "stack-push" | "secret-set":
            _parse_hex(args[0], lineno)
        case "stack-pop" | "fd-close":
            _parse_int(args[0], lineno)
        case "fd-open":
            _parse_int(args[0], lineno)
        case "fd-seek":
            _parse_int(args[0], lineno)
            _parse_int(args[1], lineno)
        case "counter-inc":
            if len(_parse_hex(args[0], lineno)) != COUNTER_ID_SIZE:
                raise GuestScriptError(f"line {lineno}: counter id must be 8 bytes")
        case "syscall":
            if len(args) == 2:
                _parse_hex(args[1], lineno)
    return [Command(op, tuple(args), lineno)]


@dataclass(frozen=True)
class GuestScript:
    """Parsed guest script."""

    init: tuple[Command, ...] = ()
    reload: tuple[Command, ...] = ()
    main: tuple[Command, ...] = ()

    @classmethod
    def parse(cls, text: str) -> GuestScript:
        """Parse script text into its sections."""
        sections: dict[str, list[Command]] = {name: [] for name in SECTIONS}
        current: str | None = None
        for lineno, raw_line in enumerate(text.splitlines(), 1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip()
                if current not in sections:
                    raise GuestScriptError(f"line {lineno}: unknown section {line}")
                continue
            if current is None:
                raise GuestScriptError(f"line {lineno}: command outside a section")
            sections[current].extend(_parse_command(line.split(), lineno, current))
        return cls(*(tuple(sections[name]) for name in SECTIONS))


def program_measurement(elf_bytes: bytes, script_text: str) -> EnclaveMeasurement:
    """Measure a guest's canonical persistent content."""
    return measure_enclave(lp(elf_bytes) + lp(script_text.encode()))


@dataclass(frozen=True)
class GuestProgram:
    """Measured guest application: ELF identity plus script."""

    name: str
    elf_bytes: bytes
    script_text: str
    measurement: EnclaveMeasurement
    signer: SignerMeasurement
    elf_path: Path | None = None
    script: GuestScript = field(default_factory=GuestScript, compare=False, repr=False)

    @classmethod
    def build(
        cls,
        name: str,
        elf_bytes: bytes,
        script_text: str,
        *,
        vendor: str = DEFAULT_VENDOR,
        elf_path: Path | None = None,
    ) -> GuestProgram:
        """Parse and measure a program."""
        return cls(
            name=name,
            elf_bytes=elf_bytes,
            script_text=script_text,
            measurement=program_measurement(elf_bytes, script_text),
            signer=SignerMeasurement(hashlib.sha256(vendor.encode()).digest()),
            elf_path=elf_path,
            script=GuestScript.parse(script_text),
        )

    @classmethod
    def from_fixture(cls, scenario: int, fixtures_dir: Path = FIXTURES_DIR) -> GuestProgram:
        """Load a shipped scenario fixture, generating its ELF."""
        base = fixtures_dir / f"scenario{scenario}"
        elf = build_elf(parse_description((base / FIXTURE_ELF_SPEC).read_text()))
        return cls.build(f"scenario{scenario}", elf, (base / FIXTURE_SCRIPT).read_text())

    def verify_measurement(self) -> None:
        """Recompute the measurement and compare with the stored one."""
        actual = program_measurement(self.elf_bytes, self.script_text)
        if actual != self.measurement:
            raise MeasurementMismatch(
                f"{self.name}: expected {self.measurement}, measured {actual}"
            )


class GuestInstance:
    """Running instance of a guest program.

    State changes only happen while Running; the lock keeps pausing and
    externalizing mutually exclusive with stepping.
    """

    def __init__(
        self,
        program: GuestProgram,
        counters: EffectiveCounters,
        *,
        marker: str = DEFAULT_RESUME_MARKER,
        loaded_elf: bytes | None = None,
    ) -> None:
        """Initialize an instance; guest_launch drives the startup sections."""
        self.program = program
        self.marker = marker
        self.loaded_elf = program.elf_bytes if loaded_elf is None else loaded_elf
        self.trace = TraceLog()
        self.run_state = RunState.RUNNING
        self.counters = counters
        self.counter_reads: list[tuple[bytes, int]] = []
        self._heap = bytearray()
        self._stack = bytearray()
        self._pc = 0
        self._fds: dict[int, FdEntry] = {}
        self._secrets = b""
        self._lock = threading.RLock()

    @property
    def is_running(self) -> bool:
        """Return whether the instance is running."""
        return self.run_state is RunState.RUNNING

    @property
    def is_paused(self) -> bool:
        """Return whether the instance is paused."""
        return self.run_state is RunState.PAUSED

    @property
    def pc(self) -> int:
        """Return the number of main commands executed."""
        return self._pc

    def _require(self, *allowed: RunState) -> None:
        if self.run_state not in allowed:
            raise InvalidRunState(f"{self.program.name} is {self.run_state}")

    def restore(self, state: VolatileState) -> None:
        """Load memory, descriptors and secrets from a captured state."""
        stack = state.stack_image
        self._pc = int.from_bytes(stack[:PC_SIZE].ljust(PC_SIZE, b"\x00"), "little")
        self._stack = bytearray(stack[PC_SIZE:])
        self._heap = bytearray(state.heap_image)
        self._fds = {entry.fd: entry for entry in state.fd_table}
        self._secrets = state.secrets

    def snapshot(self) -> VolatileState:
        """Capture the current volatile state."""
        with self._lock:
            self._require(RunState.RUNNING, RunState.PAUSED)
            return VolatileState(
                heap_image=bytes(self._heap),
                stack_image=u64(self._pc) + bytes(self._stack),
                fd_table=tuple(self._fds.values()),
                counters=self.counters.values(),
                secrets=self._secrets,
            )

    def reserve_heap(self, size: int) -> None:
        """Grow the heap image to at least size bytes."""
        with self._lock:
            self._require(RunState.RUNNING)
            if len(self._heap) < size:
                self._heap.extend(bytes(size - len(self._heap)))

    def execute(self, command: Command) -> None:
        """Run one command against the instance state."""
        args = command.args
        match command.op:
            case "heap-write":
                offset, data = int(args[0], 0), bytes.fromhex(args[1])
                if len(self._heap) < offset + len(data):
                    self._heap.extend(bytes(offset + len(data) - len(self._heap)))
                self._heap[offset : offset + len(data)] = data
            case "stack-push":
                self._stack.extend(bytes.fromhex(args[0]))
            case "stack-pop":
                count = min(int(args[0], 0), len(self._stack))
                del self._stack[len(self._stack) - count :]
            case "fd-open":
                fd = int(args[0], 0)
                self._fds[fd] = FdEntry(fd, args[1], 0)
            case "fd-seek":
                fd = int(args[0], 0)
                if fd not in self._fds:
                    raise GuestScriptError(f"line {command.lineno}: fd {fd} is not open")
                self._fds[fd] = FdEntry(fd, self._fds[fd].path, int(args[1], 0))
            case "fd-close":
                self._fds.pop(int(args[0], 0), None)
            case "secret-set":
                self._secrets = bytes.fromhex(args[0])
            case "counter-inc":
                counter_id = bytes.fromhex(args[0])
                self.counter_reads.append((counter_id, self.counters.increment(counter_id)))
            case "syscall":
                params = bytes.fromhex(args[1]) if len(args) > 1 else b""
                trace_record(self.trace, args[0], params)
            case "emit-resume-marker":
                trace_record(self.trace, self.marker)

    def step(self, count: int = 1) -> None:
        """Execute count main commands."""
        with self._lock:
            self._require(RunState.RUNNING)
            main = self.program.script.main
            for _ in range(count):
                if main:
                    self.execute(main[self._pc % len(main)])
                self._pc += 1

    def pause(self) -> None:
        """Suspend execution."""
        with self._lock:
            self._require(RunState.RUNNING)
            self.run_state = RunState.PAUSED

    def resume(self) -> None:
        """Continue a paused instance."""
        with self._lock:
            self._require(RunState.PAUSED)
            self.run_state = RunState.RUNNING

    def terminate(self) -> None:
        """Stop the instance for good."""
        with self._lock:
            self._require(RunState.RUNNING, RunState.PAUSED)
            self.run_state = RunState.TERMINATED
            self.trace.terminate()

    def counter_value(self, counter_id: bytes) -> int:
        """Return the effective value of a counter."""
        return self.counters.read(counter_id)

    def __repr__(self) -> str:
        """Describe the instance without its memory contents."""
        return (
            f"GuestInstance({self.program.name}, {self.run_state}, "
            f"pc={self._pc}, events={len(self.trace.events)})"
        )


def guest_launch(
    program: GuestProgram,
    initial_state: VolatileState | None = None,
    *,
    marker: str = DEFAULT_RESUME_MARKER,
    tee: TeeBackend | None = None,
    loader: ImageLoader | None = None,
) -> GuestInstance:
    """Launch a guest, fresh or from a restored state.

    A fresh launch runs ``[init]``. A restored launch loads the state,
    applies its counters as offsets to zeroed local counters and runs
    ``[reload]``, which ends by emitting the resume marker. The optional
    loader maps the program's ELF to the image actually mapped.
    """
    program.verify_measurement()
    bank = tee.new_counter_bank() if tee is not None else CounterBank()
    loaded = loader(program.elf_bytes) if loader is not None else None
    if initial_state is None or initial_state.is_empty:
        instance = GuestInstance(
            program, EffectiveCounters(bank), marker=marker, loaded_elf=loaded
        )
        for command in program.script.init:
            instance.execute(command)
        LOGGER.debug("Launched %s (%s) fresh", program.name, program.measurement)
        return instance
    counters = apply_counter_offsets(bank, export_counter_offsets(initial_state))
    instance = GuestInstance(program, counters, marker=marker, loaded_elf=loaded)
    instance.restore(initial_state)
    for command in program.script.reload:
        instance.execute(command)
    LOGGER.debug(
        "Launched %s (%s) from restored state at pc %d",
        program.name,
        program.measurement,
        instance.pc,
    )
    return instance


def guest_pause(instance: GuestInstance) -> None:
    """Pause a running instance."""
    instance.pause()


def guest_step(instance: GuestInstance, count: int) -> None:
    """Step a running instance."""
    instance.step(count)


def guest_terminate(instance: GuestInstance) -> None:
    """Terminate an instance."""
    instance.terminate()


def profile_reload_graph(
    program: GuestProgram, marker: str = DEFAULT_RESUME_MARKER
) -> SysCallGraph:
    """Record the reload trace in a trusted run and build its reference graph."""
    source = guest_launch(program, marker=marker)
    source.pause()
    restored = guest_launch(program, source.snapshot(), marker=marker)
    prefix = trace_until_marker(restored.trace, marker)
    if not prefix.marker_seen:
        raise GuestScriptError(f"{program.name}: reload never emits the resume marker")
    return graph_from_trace(prefix.events)

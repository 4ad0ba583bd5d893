"""System-call trace log and SC-CFG construction and verification."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
import hashlib
from pathlib import Path

from .codec import ByteReader, lp_str, u32
from .const import HASH_SIZE
from .exceptions import TraceFormatError, TraceTerminated

TRACE_END = "END"


def _check_name(name: str) -> None:
    if not name or any(ch.isspace() for ch in name):
        raise TraceFormatError(f"invalid syscall name {name!r}")


@dataclass(frozen=True)
class SysCallEvent:
    """One recorded system call."""

    sequence_no: int
    name: str
    params_digest: bytes


@dataclass
class TraceLog:
    """Append-only system-call log of one guest instance."""

    events: list[SysCallEvent] = field(default_factory=list)
    terminated: bool = False

    def terminate(self) -> None:
        """Close the log to further appends."""
        self.terminated = True

    def to_text(self) -> str:
        """Render the log in the line-oriented trace file format."""
        lines = [f"{e.sequence_no} {e.name} {e.params_digest.hex()}" for e in self.events]
        if self.terminated:
            lines.append(TRACE_END)
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str) -> TraceLog:
        """Parse the trace file format."""
        log = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if log.terminated:
                raise TraceFormatError(f"line {lineno}: event after {TRACE_END}")
            if line.strip() == TRACE_END:
                log.terminate()
                continue
            parts = line.split()
            if len(parts) != 3:
                raise TraceFormatError(f"line {lineno}: expected 3 fields")
            try:
                seq = int(parts[0])
                digest = bytes.fromhex(parts[2])
            except ValueError as err:
                raise TraceFormatError(f"line {lineno}: {err}") from err
            if len(digest) != HASH_SIZE:
                raise TraceFormatError(f"line {lineno}: digest must be 32 bytes")
            if log.events and seq <= log.events[-1].sequence_no:
                raise TraceFormatError(f"line {lineno}: sequence not increasing")
            _check_name(parts[1])
            log.events.append(SysCallEvent(seq, parts[1], digest))
        return log

    def write(self, path: Path) -> None:
        """Write the log to a trace file."""
        path.write_text(self.to_text())

    @classmethod
    def read(cls, path: Path) -> TraceLog:
        """Read a trace file."""
        return cls.from_text(path.read_text())


def trace_record(log: TraceLog, name: str, params: bytes = b"") -> TraceLog:
    """Append a system call to the log."""
    if log.terminated:
        raise TraceTerminated(f"cannot record {name!r} after termination")
    _check_name(name)
    seq = log.events[-1].sequence_no + 1 if log.events else 0
    log.events.append(SysCallEvent(seq, name, hashlib.sha256(params).digest()))
    return log


@dataclass(frozen=True)
class TracePrefix:
    """Events up to and including the resume marker."""

    events: tuple[SysCallEvent, ...]
    marker_seen: bool


def trace_until_marker(log: TraceLog, marker: str) -> TracePrefix:
    """Return the trace prefix ending at the first marker event."""
    for index, event in enumerate(log.events):
        if event.name == marker:
            return TracePrefix(tuple(log.events[: index + 1]), marker_seen=True)
    return TracePrefix(tuple(log.events), marker_seen=False)


@dataclass(frozen=True)
class SysCallGraph:
    """Directed graph over system-call names."""

    nodes: frozenset[str] = frozenset()
    edges: frozenset[tuple[str, str]] = frozenset()

    def __post_init__(self) -> None:
        """Check every edge endpoint is a node."""
        for src, dst in self.edges:
            if src not in self.nodes or dst not in self.nodes:
                raise ValueError(f"edge ({src}, {dst}) references unknown node")

    def with_edge(self, src: str, dst: str) -> SysCallGraph:
        """Return a copy with one more edge (and its endpoints)."""
        return SysCallGraph(self.nodes | {src, dst}, self.edges | {(src, dst)})

    @classmethod
    def from_bytes(cls, data: bytes) -> SysCallGraph:
        """Parse canonical graph bytes."""
        reader = ByteReader(data, TraceFormatError)
        nodes = [reader.lp_str() for _ in range(reader.u32())]
        edges = [(reader.lp_str(), reader.lp_str()) for _ in range(reader.u32())]
        reader.finish()
        try:
            return cls(frozenset(nodes), frozenset(edges))
        except ValueError as err:
            raise TraceFormatError(str(err)) from err


def graph_from_trace(events: Iterable[SysCallEvent]) -> SysCallGraph:
    """Build the SC-CFG of consecutive call transitions."""
    return graph_of_names([event.name for event in events])


def graph_canonical_bytes(graph: SysCallGraph) -> bytes:
    """Encode a graph deterministically."""
    parts = [u32(len(graph.nodes))]
    parts.extend(lp_str(node) for node in sorted(graph.nodes))
    parts.append(u32(len(graph.edges)))
    for src, dst in sorted(graph.edges):
        parts.append(lp_str(src) + lp_str(dst))
    return b"".join(parts)


class DeviationKind(StrEnum):
    """How an observation departs from the reference."""

    UNKNOWN_NODE = "UnknownNode"
    UNKNOWN_EDGE = "UnknownEdge"
    MISSING_MANDATORY_PREFIX = "MissingMandatoryPrefix"


@dataclass(frozen=True)
class GraphDeviation:
    """One offending node, edge or missing marker."""

    kind: DeviationKind
    detail: str | tuple[str, str]


def graph_verify(reference: SysCallGraph, observed: SysCallGraph) -> list[GraphDeviation]:
    """Report every node and edge of observed absent from reference."""
    deviations = [
        GraphDeviation(DeviationKind.UNKNOWN_NODE, node)
        for node in sorted(observed.nodes - reference.nodes)
    ]
    deviations.extend(
        GraphDeviation(DeviationKind.UNKNOWN_EDGE, edge)
        for edge in sorted(observed.edges - reference.edges)
    )
    return deviations


def verify_reload(
    reference: SysCallGraph, prefix: TracePrefix, marker: str
) -> list[GraphDeviation]:
    """Check a reload trace prefix: marker present and graph subsumed."""
    deviations = graph_verify(reference, graph_from_trace(prefix.events))
    if not prefix.marker_seen:
        deviations.append(GraphDeviation(DeviationKind.MISSING_MANDATORY_PREFIX, marker))
    return deviations


def graph_of_names(names: Sequence[str]) -> SysCallGraph:
    """Build a graph from a bare call-name sequence."""
    return SysCallGraph(frozenset(names), frozenset(zip(names, names[1:], strict=False)))

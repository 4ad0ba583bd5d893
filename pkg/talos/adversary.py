"""Network adversary and the in-memory scripted link it sits on.

Hooks only ever see frame bytes. A hook matches frames by message kind
and, optionally, by the index of the migration run it should act in.
"""

from __future__ import annotations

from collections import deque
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from enum import StrEnum
import json
from pathlib import Path
import random
from typing import TYPE_CHECKING, Any

from .config import ADVERSARY_SCHEMA, validate
from .const import (
    CONF_ACTION,
    CONF_HOOKS,
    CONF_INDEX,
    CONF_MESSAGE,
    CONF_NAME,
    CONF_OFFSET,
    CONF_PAYLOAD,
    CONF_RETARGET,
    CONF_SEED,
    CONF_SESSION,
    CONF_XOR,
    DEFAULT_SEED,
    FRAME_HEADER_SIZE,
    LOGGER,
    SESSION_ID_SIZE,
)
from .exceptions import ConfigError, TalosError
from .protocol import MigrationSession, Outcome
from .wire import MessageType, decode_message

if TYPE_CHECKING:
    from .node import MigrationNode
    from .tee_sim import EnclaveMeasurement

MESSAGE_KINDS: dict[str, MessageType | None] = {
    "any": None,
    "challenge": MessageType.CHALLENGE,
    "channel-key": MessageType.CHANNEL_KEY,
    "state-package": MessageType.STATE_PACKAGE,
    "attestation-digest": MessageType.ATTESTATION_DIGEST,
    "verification-result": MessageType.VERIFICATION_RESULT,
    "abort": MessageType.ABORT,
}

# Upper bound on frames one run may move; a script looping forever ends here.
MAX_DELIVERIES = 256


class Action(StrEnum):
    """What a hook does to a matching frame."""

    RECORD = "record"
    REPLAY = "replay"
    MUTATE = "mutate"
    INJECT = "inject"
    DUPLICATE = "duplicate"
    DROP = "drop"


class Direction(StrEnum):
    """Which way a frame travels."""

    TO_SOURCE = "to-source"
    TO_TARGET = "to-target"


@dataclass(frozen=True)
class Hook:
    """One adversary action."""

    action: Action
    message: str = "any"
    session: int | None = None
    offset: int | None = None
    xor: int = 1
    index: int = 0
    payload: bytes = b""
    retarget: bool = False

    def matches(self, frame: bytes, run: int) -> bool:
        """Return whether the hook applies to frame in run."""
        if self.session is not None and self.session != run:
            return False
        kind = MESSAGE_KINDS[self.message]
        return kind is None or (len(frame) > 6 and frame[6] == kind)


@dataclass(frozen=True)
class AdversaryScript:
    """Named, seeded list of hooks."""

    name: str
    hooks: tuple[Hook, ...]
    seed: int = DEFAULT_SEED

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AdversaryScript:
        """Validate and convert a script document."""
        conf = validate(ADVERSARY_SCHEMA, data, "adversary script")
        hooks = tuple(
            Hook(
                action=Action(hook[CONF_ACTION]),
                message=hook[CONF_MESSAGE],
                session=hook.get(CONF_SESSION),
                offset=hook.get(CONF_OFFSET),
                xor=hook[CONF_XOR],
                index=hook[CONF_INDEX],
                payload=bytes.fromhex(hook.get(CONF_PAYLOAD, "")),
                retarget=hook[CONF_RETARGET],
            )
            for hook in conf[CONF_HOOKS]
        )
        return cls(conf[CONF_NAME], hooks, conf[CONF_SEED])

    @classmethod
    def load(cls, path: Path) -> AdversaryScript:
        """Read a JSON script file."""
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read adversary script {path}: {err}") from err
        return cls.from_dict(data)


def frame_kind(frame: bytes) -> str:
    """Return the message type name of a frame."""
    if len(frame) < FRAME_HEADER_SIZE:
        return "short"
    try:
        return MessageType(frame[6]).name
    except ValueError:
        return f"{frame[6]:#04x}"


def _with_session(frame: bytes, current: bytes) -> bytes:
    start = FRAME_HEADER_SIZE
    end = start + SESSION_ID_SIZE
    if len(frame) < end or len(current) < end:
        return frame
    return frame[:start] + current[start:end] + frame[end:]


NAMED_SCRIPTS: dict[str, AdversaryScript] = {
    "honest": AdversaryScript("honest", ()),
    # Reflect the source's own package back at it in place of the digest.
    "replay-package": AdversaryScript(
        "replay-package",
        (
            Hook(Action.RECORD, "state-package"),
            Hook(Action.REPLAY, "attestation-digest", index=0),
        ),
    ),
    "mutate-package": AdversaryScript(
        "mutate-package", (Hook(Action.MUTATE, "state-package", offset=40, xor=0x01),)
    ),
    "drop-digest": AdversaryScript("drop-digest", (Hook(Action.DROP, "attestation-digest"),)),
    "duplicate-package": AdversaryScript(
        "duplicate-package", (Hook(Action.DUPLICATE, "state-package"),)
    ),
}


def resolve_script(name_or_path: str) -> AdversaryScript:
    """Return a named script, or load one from a file."""
    if name_or_path in NAMED_SCRIPTS:
        return NAMED_SCRIPTS[name_or_path]
    path = Path(name_or_path)
    if not path.is_file():
        raise ConfigError(
            f"unknown adversary {name_or_path!r}; named scripts: {', '.join(NAMED_SCRIPTS)}"
        )
    return AdversaryScript.load(path)


@dataclass
class Adversary:
    """Stateful executor of a script; recordings survive across runs."""

    script: AdversaryScript
    recorded: list[bytes] = field(default_factory=list)
    fired: list[tuple[int, Action, str]] = field(default_factory=list)
    run: int = 0
    _rng: random.Random = field(init=False, repr=False)

    def __post_init__(self) -> None:
        """Seed the random source."""
        self._rng = random.Random(self.script.seed)

    def next_run(self) -> None:
        """Move on to the next migration run."""
        self.run += 1

    def intercept(self, frame: bytes) -> list[bytes]:
        """Return the frames delivered in place of frame."""
        frames = [frame]
        for hook in self.script.hooks:
            out: list[bytes] = []
            for current in frames:
                if not hook.matches(current, self.run):
                    out.append(current)
                    continue
                out.extend(self._apply(hook, current))
            frames = out
        return frames

    def _apply(self, hook: Hook, frame: bytes) -> list[bytes]:
        match hook.action:
            case Action.RECORD:
                self.recorded.append(frame)
                return [frame]
            case Action.REPLAY:
                if hook.index >= len(self.recorded):
                    return [frame]
                self._fire(hook, frame)
                replayed = self.recorded[hook.index]
                if hook.retarget:
                    replayed = _with_session(replayed, frame)
                return [replayed]
            case Action.MUTATE:
                self._fire(hook, frame)
                return [self._mutate(frame, hook)]
            case Action.INJECT:
                self._fire(hook, frame)
                return [frame, hook.payload]
            case Action.DUPLICATE:
                self._fire(hook, frame)
                return [frame, frame]
            case Action.DROP:
                self._fire(hook, frame)
                return []
        return [frame]

    def _fire(self, hook: Hook, frame: bytes) -> None:
        self.fired.append((self.run, hook.action, frame_kind(frame)))

    def _mutate(self, frame: bytes, hook: Hook) -> bytes:
        payload_len = len(frame) - FRAME_HEADER_SIZE
        if payload_len <= 0:
            return frame
        offset = hook.offset if hook.offset is not None else self._rng.randrange(payload_len)
        position = FRAME_HEADER_SIZE + offset % payload_len
        mutated = bytearray(frame)
        mutated[position] ^= hook.xor
        return bytes(mutated)


type Auditor = Callable[[], None]


@dataclass
class LinkResult:
    """How one scripted migration ended on both sides."""

    target_session: MigrationSession
    source_session: MigrationSession | None
    transcript: list[tuple[Direction, str]]

    @property
    def confirmed(self) -> bool:
        """Return whether the source confirmed the migration."""
        return (
            self.source_session is not None
            and self.source_session.outcome is not None
            and self.source_session.outcome is Outcome.CONFIRMED
        )


class ScriptedLink:
    """Deterministic in-memory wire between a target and a source node."""

    def __init__(
        self,
        target: MigrationNode,
        source: MigrationNode,
        adversary: Adversary | None = None,
        auditor: Auditor | None = None,
    ) -> None:
        """Initialize the link."""
        self.target = target
        self.source = source
        self.adversary = adversary
        self.auditor = auditor

    def _deliver(self, direction: Direction, frame: bytes) -> list[tuple[Direction, bytes]]:
        node = self.source if direction is Direction.TO_SOURCE else self.target
        back = Direction.TO_TARGET if direction is Direction.TO_SOURCE else Direction.TO_SOURCE
        try:
            message = decode_message(frame)
        except TalosError as err:
            LOGGER.debug("Link dropped undecodable frame: %s", err)
            return []
        replies = node.handle_message(message)
        if self.auditor is not None:
            self.auditor()
        return [(back, reply.to_frame()) for reply in replies]

    def migrate(self, measurement: EnclaveMeasurement) -> LinkResult:
        """Run one pull migration to completion, stalls included."""
        challenge = self.target.start_migration(measurement)
        return self.drive(challenge.session_id, [(Direction.TO_SOURCE, challenge.to_frame())])

    def drive(
        self, session_id: bytes, pending: Iterable[tuple[Direction, bytes]]
    ) -> LinkResult:
        """Deliver pending frames and everything they cause until the link is quiet."""
        queue: deque[tuple[Direction, bytes]] = deque(pending)
        transcript: list[tuple[Direction, str]] = []
        stalled: set[str] = set()
        deliveries = 0
        while True:
            while queue and deliveries < MAX_DELIVERIES:
                direction, frame = queue.popleft()
                frames = self.adversary.intercept(frame) if self.adversary else [frame]
                for delivered in frames:
                    deliveries += 1
                    transcript.append((direction, frame_kind(delivered)))
                    queue.extend(self._deliver(direction, delivered))
            queue.clear()
            # Quiet link: the target gives up first, then the source.
            if "target" not in stalled:
                stalled.add("target")
                abort = self.target.stall(session_id)
                if abort is not None:
                    queue.append((Direction.TO_SOURCE, abort.to_frame()))
                    continue
            if "source" not in stalled:
                stalled.add("source")
                abort = self.source.stall(session_id)
                if self.auditor is not None:
                    self.auditor()
                if abort is not None:
                    queue.append((Direction.TO_TARGET, abort.to_frame()))
                    continue
            break
        if self.adversary is not None:
            self.adversary.next_run()
        target_session = self.target.session(session_id)
        assert target_session is not None
        return LinkResult(target_session, self.source.session(session_id), transcript)

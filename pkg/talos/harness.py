"""Executable security games over a scripted two-node testbed.

Every trial sets up its game, lets the adversary act through frame hooks
or host-side loaders, and evaluates the game's winning condition on the
resulting sessions and registries.

* Game I: a recorded honest migration is replayed into a later one.
* Game II: an unapproved Migration Service tries to pull or push an app.
* Game III: many clones race for the same instance at once.
* Game IV: the state package is modified in flight.
* Game V: the target host alters the application it relaunches.
"""

from __future__ import annotations

from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import StrEnum
from functools import lru_cache, partial
import hashlib
import random
import threading

from .adversary import (
    Action,
    Adversary,
    AdversaryScript,
    Direction,
    Hook,
    LinkResult,
    ScriptedLink,
    frame_kind,
)
from .const import (
    AEAD_NONCE_SIZE,
    DEFAULT_CLONES,
    DEFAULT_RESUME_MARKER,
    DEFAULT_SCENARIO,
    DEFAULT_SEED,
    DEFAULT_TRIALS,
    HASH_SIZE,
    LOGGER,
    SCENARIOS,
    SESSION_ID_SIZE,
    WARMUP_STEPS,
)
from .crypto_channel import Certificate, NodeKeyPair, cert_issue, sign
from .elf_introspect import EHDR, PT_LOAD, Perm, parse_elf
from .exceptions import AbortReason, FixtureInitFailure, HarnessError, TalosError
from .guest_model import GuestInstance, GuestProgram, guest_launch, profile_reload_graph
from .node import MigrationNode
from .orchestrator import ApplicationProfile, Orchestrator, enrollment_report_data
from .protocol import Launcher, MigrationSession
from .sccfg import SysCallEvent, SysCallGraph
from .state_manager import VolatileState
from .tee_sim import EnclaveMeasurement, measure_enclave
from .wire import (
    Abort,
    AnyMessage,
    Challenge,
    ChannelKey,
    EnrollRequest,
    StatePackage,
    decode_message,
)

BARRIER_TIMEOUT = 30.0
# Offsets inside a StatePackage payload: session id, then the masked state's
# length prefix, AEAD nonce, ciphertext length prefix and ciphertext.
_MASKED_START = SESSION_ID_SIZE + 4
_CIPHERTEXT_START = _MASKED_START + AEAD_NONCE_SIZE + 4


class Game(StrEnum):
    """Security game identifiers."""

    I = "I"  # noqa: E741
    II = "II"
    III = "III"
    IV = "IV"
    V = "V"


@lru_cache(maxsize=len(SCENARIOS))
def load_program(scenario: int) -> GuestProgram:
    """Return the fixture program of a scenario."""
    return GuestProgram.from_fixture(scenario)


@lru_cache(maxsize=len(SCENARIOS))
def reference_graph(scenario: int) -> SysCallGraph:
    """Profile the reload graph of a scenario in a trusted run."""
    return profile_reload_graph(load_program(scenario), DEFAULT_RESUME_MARKER)


def session_outcome(session: MigrationSession | None) -> str:
    """Summarize how a session ended."""
    if session is None:
        return "none"
    if session.outcome is None:
        return str(session.phase)
    if session.abort_reason is not None:
        return f"{session.outcome}:{session.abort_reason.name}"
    return str(session.outcome)


def describe(result: LinkResult) -> str:
    """Summarize both sides of a scripted migration."""
    return (
        f"target={session_outcome(result.target_session)} "
        f"source={session_outcome(result.source_session)}"
    )


@dataclass
class Testbed:
    """Orchestrator plus enrolled nodes sharing one fixture application.

    The app starts Active on the first node. ``audit`` is wired into every
    scripted link and records any moment two registries hold it Active.
    """

    orchestrator: Orchestrator
    program: GuestProgram
    profile: ApplicationProfile
    nodes: list[MigrationNode] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    @classmethod
    def create(
        cls,
        scenario: int = DEFAULT_SCENARIO,
        *,
        nodes: int = 2,
        steps: int = WARMUP_STEPS,
        state_size: int = 0,
    ) -> Testbed:
        """Enroll nodes, provision the app everywhere and launch it on the first."""
        try:
            program = load_program(scenario)
            profile = ApplicationProfile(
                program.measurement,
                reference_graph(scenario),
                DEFAULT_RESUME_MARKER,
                program.signer,
            )
            bed = cls(Orchestrator(NodeKeyPair.generate()), program, profile)
            for index in range(nodes):
                bed.add_node(f"node-{index}")
            guest = bed.nodes[0].launch(program.measurement)
            if state_size:
                guest.reserve_heap(state_size)
            guest.step(steps)
        except (TalosError, OSError) as err:
            raise FixtureInitFailure(f"scenario {scenario}: {err}") from err
        return bed

    @property
    def measurement(self) -> EnclaveMeasurement:
        """Return the app's measurement."""
        return self.program.measurement

    def add_node(self, node_id: str) -> MigrationNode:
        """Create, enroll and provision one node."""
        node = MigrationNode.create(node_id)
        self.orchestrator.trust_platform(node.tee.attestation_public_key)
        node.apply_enrollment(self.orchestrator.handle_message(node.enrollment_request()))
        node.install_program(self.program)
        node.install_profile(self.orchestrator.provision_profile(self.profile, node_id))
        self.nodes.append(node)
        return node

    def holder(self) -> MigrationNode:
        """Return the node running the app."""
        for node in self.nodes:
            guest = node.guests.get(self.measurement)
            if guest is not None and guest.is_running and node.registry.is_active(
                self.measurement
            ):
                return node
        raise HarnessError(f"no node runs {self.measurement}")

    def guest(self) -> GuestInstance:
        """Return the running instance."""
        return self.holder().guests[self.measurement]

    def other(self, node: MigrationNode) -> MigrationNode:
        """Return the first node that is not node."""
        return next(n for n in self.nodes if n is not node)

    def audit(self) -> None:
        """Record a violation if more than one registry holds the app Active."""
        active = [n.node_id for n in self.nodes if n.registry.is_active(self.measurement)]
        if len(active) > 1:
            LOGGER.error("Measurement %s Active on %s", self.measurement, ", ".join(active))
            self.violations.append(",".join(active))

    def link(
        self,
        target: MigrationNode,
        source: MigrationNode,
        adversary: Adversary | None = None,
    ) -> ScriptedLink:
        """Return an audited scripted link."""
        return ScriptedLink(target, source, adversary, self.audit)

    def migrate(self, adversary: Adversary | None = None) -> LinkResult:
        """Pull the app from its holder to the next node."""
        source = self.holder()
        return self.link(self.other(source), source, adversary).migrate(self.measurement)


@dataclass
class GameReport:
    """Aggregated outcome of one game."""

    game: Game
    trials: int
    adversary_wins: int = 0
    transcripts: list[str] = field(default_factory=list)
    controls: int = 0
    controls_confirmed: int = 0
    max_acquisitions: int = 0

    @property
    def control_confirmed(self) -> bool:
        """Return whether every honest control run confirmed."""
        return self.controls_confirmed == self.controls

    def record(self, index: int, variant: str, outcome: str, *, won: bool) -> None:
        """Add one trial."""
        if won:
            self.adversary_wins += 1
        self.transcripts.append(f"{index}\t{variant}\t{outcome}\t{'win' if won else 'loss'}")

    def control(self, result: LinkResult) -> None:
        """Add one honest control run."""
        self.controls += 1
        if result.confirmed:
            self.controls_confirmed += 1
        else:
            LOGGER.warning("Game %s control run did not confirm: %s", self.game, describe(result))

    def to_text(self) -> str:
        """Render the report for reading."""
        lines = [
            f"Game {self.game}",
            f"  trials:          {self.trials}",
            f"  adversary wins:  {self.adversary_wins}",
            f"  controls:        {self.controls_confirmed}/{self.controls} confirmed",
        ]
        if self.game is Game.III:
            lines.append(f"  max acquisitions per trial: {self.max_acquisitions}")
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        """Render one tab-separated record per line."""
        lines = [
            f"summary\t{self.game}\t{self.trials}\t{self.adversary_wins}"
            f"\t{self.controls_confirmed}\t{self.controls}\t{self.max_acquisitions}"
        ]
        lines.extend(f"trial\t{self.game}\t{line}" for line in self.transcripts)
        return "\n".join(lines) + "\n"


# --- Game I: replay ---

# (variant, message replaced in the later run, retarget to the live session)
REPLAY_VARIANTS: tuple[tuple[str, str, bool], ...] = (
    ("digest", "attestation-digest", True),
    ("digest-stale", "attestation-digest", False),
    ("package", "state-package", True),
    ("channel-key", "channel-key", True),
    ("challenge", "challenge", False),
)


def _replay_trial(report: GameReport, index: int, rng: random.Random, scenario: int) -> None:
    bed = Testbed.create(scenario)
    recorder = Adversary(
        AdversaryScript("record", (Hook(Action.RECORD),), rng.randrange(2**32))
    )
    report.control(bed.migrate(recorder))
    variant, message, retarget = rng.choice(REPLAY_VARIANTS)
    recorded_kinds = [frame_kind(frame) for frame in recorder.recorded]
    wanted = {
        "attestation-digest": "ATTESTATION_DIGEST",
        "state-package": "STATE_PACKAGE",
        "channel-key": "CHANNEL_KEY",
        "challenge": "CHALLENGE",
    }[message]
    if wanted not in recorded_kinds:
        report.record(index, variant, "nothing-recorded", won=False)
        return
    replayer = Adversary(
        AdversaryScript(
            f"replay-{variant}",
            (Hook(Action.REPLAY, message, index=recorded_kinds.index(wanted), retarget=retarget),),
            rng.randrange(2**32),
        ),
        recorded=list(recorder.recorded),
    )
    # Pull the app back; the earlier run's frames stand in for the live ones.
    result = bed.migrate(replayer)
    won = bool(replayer.fired) and result.confirmed
    report.record(index, variant, describe(result), won=won)


# --- Game II: unapproved Migration Service ---

CLONING_VARIANTS = (
    "self-signed",
    "forged-signature",
    "stolen-cert",
    "untrusted-platform",
    "wrong-service",
    "rogue-source",
)


def _self_signed(node: MigrationNode) -> Certificate:
    return cert_issue(NodeKeyPair.generate(), node.keypair.public_bytes(), node.node_id)


def _rogue_node(bed: Testbed, variant: str, index: int) -> tuple[MigrationNode, bool]:
    """Build the adversary's node; also return whether the orchestrator enrolled it."""
    rogue = MigrationNode.create(f"rogue-{index}")
    rogue.orchestrator_key = bed.orchestrator.public_key
    enrolled = False
    match variant:
        case "self-signed" | "rogue-source":
            rogue.cert = _self_signed(rogue)
        case "forged-signature":
            unsigned = Certificate(rogue.keypair.public_bytes(), rogue.node_id, 0)
            rogue.cert = replace(
                unsigned, orchestrator_signature=sign(rogue.keypair, unsigned.subject_bytes())
            )
        case "stolen-cert":
            rogue.cert = bed.nodes[1].cert
        case "untrusted-platform":
            enrolled = bed.orchestrator.handle_message(rogue.enrollment_request()).accepted
            rogue.cert = _self_signed(rogue)
        case "wrong-service":
            bed.orchestrator.trust_platform(rogue.tee.attestation_public_key)
            pubkey = rogue.keypair.public_bytes()
            quote = rogue.tee.quote(
                measure_enclave(b"rogue-migration-service"), enrollment_report_data(pubkey)
            )
            request = EnrollRequest(rogue.node_id, pubkey, quote)
            enrolled = bed.orchestrator.handle_message(request).accepted
            rogue.cert = _self_signed(rogue)
    return rogue, enrolled


def _cloning_trial(report: GameReport, index: int, rng: random.Random, scenario: int) -> None:
    bed = Testbed.create(scenario)
    variant = rng.choice(CLONING_VARIANTS)
    rogue, enrolled = _rogue_node(bed, variant, index)
    if variant == "rogue-source":
        # A counterfeit instance on the rogue node, pushed into an honest target.
        rogue.install_program(bed.program)
        rogue.profiles[bed.measurement] = bed.profile
        rogue.launch(bed.measurement)
        target = bed.nodes[1]
        result = ScriptedLink(target, rogue, auditor=bed.audit).migrate(bed.measurement)
        won = result.target_session.imported is not None or result.confirmed
    else:
        result = ScriptedLink(rogue, bed.holder(), auditor=bed.audit).migrate(bed.measurement)
        released = any(
            direction is Direction.TO_TARGET and kind == "STATE_PACKAGE"
            for direction, kind in result.transcript
        )
        won = released or result.confirmed
    won = won or enrolled or bool(bed.violations)
    outcome = f"{describe(result)} enroll={'accepted' if enrolled else 'refused'}"
    report.record(index, variant, outcome, won=won)


# --- Game III: concurrent clones ---


def _fork_bomb_trial(report: GameReport, bed: Testbed, index: int) -> None:
    holder = bed.holder()
    holder.guests[bed.measurement].step(1)
    challengers = [node for node in bed.nodes if node is not holder]
    challenges = [(node, node.start_migration(bed.measurement)) for node in challengers]
    barrier = threading.Barrier(len(challenges), timeout=BARRIER_TIMEOUT)

    def attempt(challenge: Challenge) -> list[AnyMessage]:
        barrier.wait()
        return holder.handle_message(challenge)

    try:
        with ThreadPoolExecutor(max_workers=len(challenges)) as pool:
            replies = list(pool.map(attempt, [challenge for _, challenge in challenges]))
    except threading.BrokenBarrierError as err:
        raise HarnessError("clones never lined up for the concurrent attempt") from err
    bed.audit()
    granted: list[tuple[MigrationNode, bytes, ChannelKey]] = []
    for (node, challenge), reply in zip(challenges, replies, strict=True):
        for message in reply:
            if isinstance(message, ChannelKey):
                granted.append((node, challenge.session_id, message))
            elif isinstance(message, Abort):
                node.handle_message(message)
    report.max_acquisitions = max(report.max_acquisitions, len(granted))
    outcome = "none"
    if granted:
        winner, session_id, offer = granted[0]
        result = bed.link(winner, holder).drive(
            session_id, [(Direction.TO_TARGET, offer.to_frame())]
        )
        outcome = describe(result)
        for node, extra_id, _offer in granted[1:]:
            node.stall(extra_id)
            holder.stall(extra_id)
    won = len(granted) > 1 or bool(bed.violations)
    report.record(index, f"clones={len(challenges)}", f"acquired={len(granted)} {outcome}", won=won)


# --- Game IV: state package integrity ---

MUTATION_FIELDS = ("aead-nonce", "ciphertext", "mac")


def _package_layout(frame: bytes) -> int:
    """Return the ciphertext length of a StatePackage frame."""
    message = decode_message(frame)
    if not isinstance(message, StatePackage):
        raise HarnessError(f"expected a state package, got {frame_kind(frame)}")
    return len(message.masked.ciphertext)


def _mutation_offset(rng: random.Random, region: str, ciphertext_len: int) -> int:
    match region:
        case "aead-nonce":
            return _MASKED_START + rng.randrange(AEAD_NONCE_SIZE)
        case "ciphertext":
            return _CIPHERTEXT_START + rng.randrange(ciphertext_len)
    return _CIPHERTEXT_START + ciphertext_len + rng.randrange(HASH_SIZE)


def _sample_package(bed: Testbed, seed: int) -> int:
    """Capture one package from the holder without letting it through."""
    sampler = Adversary(
        AdversaryScript(
            "layout",
            (Hook(Action.RECORD, "state-package"), Hook(Action.DROP, "state-package")),
            seed,
        )
    )
    bed.migrate(sampler)
    if not sampler.recorded:
        raise HarnessError("sample run produced no state package")
    return _package_layout(sampler.recorded[0])


def _integrity_trial(
    report: GameReport, bed: Testbed, index: int, rng: random.Random, ciphertext_len: int
) -> None:
    region = rng.choice(MUTATION_FIELDS)
    offset = _mutation_offset(rng, region, ciphertext_len)
    bit = rng.randrange(8)
    adversary = Adversary(
        AdversaryScript(
            "mutate",
            (
                Hook(Action.RECORD, "state-package"),
                Hook(Action.MUTATE, "state-package", offset=offset, xor=1 << bit),
            ),
            rng.randrange(2**32),
        )
    )
    result = bed.migrate(adversary)
    if adversary.recorded and _package_layout(adversary.recorded[0]) != ciphertext_len:
        raise HarnessError("state package size changed between trials")
    detected = result.target_session.abort_reason is AbortReason.MAC_MISMATCH
    won = bool(adversary.fired) and (not detected or result.confirmed)
    report.record(index, f"{region}+{offset}^{1 << bit:#04x}", describe(result), won=won)


# --- Game V: application integrity ---


def rename_symbol(raw: bytes) -> bytes:
    """Flip the case of the first lowercase letter in the symbol names."""
    img = parse_elf(raw)
    strtab = img.section_named(".strtab")
    data = img.section_data(strtab) if strtab is not None else b""
    position = next((i for i, ch in enumerate(data) if ord("a") <= ch <= ord("z")), None)
    if strtab is None or position is None:
        raise HarnessError(f"{img.name or 'image'} has no symbol names")
    patched = bytearray(raw)
    patched[strtab.file_offset + position] ^= 0x20
    return bytes(patched)


def flip_segment_permission(raw: bytes) -> bytes:
    """Toggle the write bit of the first loadable segment."""
    img = parse_elf(raw)
    fields = EHDR.unpack_from(raw)
    phoff, phentsize = fields[5], fields[9]
    index = next(
        (i for i, header in enumerate(img.program_headers) if header.p_type == PT_LOAD), None
    )
    if index is None:
        raise HarnessError("image has no loadable segment")
    patched = bytearray(raw)
    patched[phoff + index * phentsize + 4] ^= int(Perm.W)
    return bytes(patched)


def extra_syscall_launcher(name: str = "ptrace") -> Launcher:
    """Return a launcher whose guests issue one extra call before the marker."""

    def launch(
        program: GuestProgram,
        initial_state: VolatileState | None = None,
        **kwargs: object,
    ) -> GuestInstance:
        instance = guest_launch(program, initial_state, **kwargs)  # type: ignore[arg-type]
        events = instance.trace.events
        at = next((i for i, e in enumerate(events) if e.name == instance.marker), len(events))
        injected = SysCallEvent(0, name, hashlib.sha256(b"").digest())
        reordered = [*events[:at], injected, *events[at:]]
        instance.trace.events = [replace(e, sequence_no=i) for i, e in enumerate(reordered)]
        return instance

    return launch


TAMPERS: dict[str, Callable[[], Launcher]] = {
    "symbol-rename": lambda: partial(guest_launch, loader=rename_symbol),
    "permission-flip": lambda: partial(guest_launch, loader=flip_segment_permission),
    "extra-syscall-edge": extra_syscall_launcher,
}


def _has_symbols(program: GuestProgram) -> bool:
    try:
        rename_symbol(program.elf_bytes)
    except HarnessError:
        return False
    return True


def _tamper_trial(report: GameReport, bed: Testbed, index: int, tamper: str) -> None:
    source = bed.holder()
    target = bed.other(source)
    target.launcher = TAMPERS[tamper]()
    try:
        result = bed.link(target, source).migrate(bed.measurement)
    finally:
        target.launcher = guest_launch
    report.record(
        index, f"{bed.program.name}/{tamper}", describe(result), won=result.confirmed
    )


# --- entry point ---


def run_game(
    game: Game,
    trials: int = DEFAULT_TRIALS,
    seed: int = DEFAULT_SEED,
    *,
    scenario: int = DEFAULT_SCENARIO,
    clones: int = DEFAULT_CLONES,
    honest: bool = False,
) -> GameReport:
    """Run trials of a game and count the adversary's wins.

    With ``honest`` every trial runs without the adversary's tampering and
    must confirm; the winning condition is still evaluated.
    """
    rng = random.Random(seed)
    report = GameReport(Game(game), trials)
    LOGGER.info("Game %s: %d trials, seed %d", report.game, trials, seed)
    if honest:
        bed = Testbed.create(scenario)
        for index in range(trials):
            result = bed.migrate()
            report.control(result)
            report.record(index, "honest", describe(result), won=bool(bed.violations))
        return report
    match report.game:
        case Game.I:
            for index in range(trials):
                _replay_trial(report, index, rng, scenario)
        case Game.II:
            for index in range(trials):
                _cloning_trial(report, index, rng, scenario)
        case Game.III:
            if clones < 2:
                raise HarnessError("Game III needs at least two clones")
            bed = Testbed.create(scenario, nodes=clones + 1)
            for index in range(trials):
                _fork_bomb_trial(report, bed, index)
        case Game.IV:
            bed = Testbed.create(scenario)
            report.control(bed.migrate())
            ciphertext_len = _sample_package(bed, rng.randrange(2**32))
            for index in range(trials):
                _integrity_trial(report, bed, index, rng, ciphertext_len)
        case Game.V:
            beds = {s: Testbed.create(s) for s in SCENARIOS}
            for bed in beds.values():
                report.control(bed.migrate())
            combos = [
                (s, tamper)
                for s in SCENARIOS
                for tamper in TAMPERS
                if tamper != "symbol-rename" or _has_symbols(beds[s].program)
            ]
            for index in range(trials):
                s, tamper = combos[index % len(combos)]
                _tamper_trial(report, beds[s], index, tamper)
    LOGGER.info(
        "Game %s finished: %d/%d adversary wins", report.game, report.adversary_wins, trials
    )
    return report

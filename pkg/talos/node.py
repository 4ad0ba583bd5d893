"""Migration node: the Migration Service of one platform."""

from __future__ import annotations

from collections.abc import Callable, Iterable
from dataclasses import dataclass
import threading
from typing import Any

from .config import NODE_SCHEMA, validate
from .const import (
    CONF_CERTIFICATE,
    CONF_LISTEN,
    CONF_NODE_ID,
    CONF_ORCHESTRATOR_KEY,
    CONF_PROVISIONED,
    CONF_REGISTRY_MODE,
    DEFAULT_LISTEN,
    DEFAULT_REGISTRY_MODE,
    LOGGER,
    MAX_FINISHED_SESSIONS,
)
from .crypto_channel import Certificate, NodeKeyPair, NonceLog
from .exceptions import (
    AbortReason,
    ConfigError,
    EnrollmentRejected,
    PhaseViolation,
    TalosError,
)
from .guest_model import GuestInstance, GuestProgram, guest_launch
from .orchestrator import ApplicationProfile, SignedProfile, enrollment_report_data
from .protocol import (
    Launcher,
    MigrationSession,
    Outcome,
    Phase,
    Role,
    abort_session,
    channel_offer,
    establish_channel,
    launch_fresh,
    smn_abort_restore,
    smn_handle_challenge,
    smn_prepare_package,
    smn_verify_and_finalize,
    teardown_proven,
    teardown_tag,
    tmn_create_challenge,
    tmn_handle_verdict,
    tmn_import,
)
from .registry import InstanceState, PigeonholeRegistry
from .state_manager import volatile_deserialize
from .storage import NodeStore, read_bytes, write_atomic
from .tee_sim import (
    SERVICE_MEASUREMENT,
    EnclaveMeasurement,
    MockTeeBackend,
    SealedBlob,
    TeeBackend,
)
from .timing import StepTimer
from .wire import (
    Abort,
    AnyMessage,
    AttestationDigest,
    Challenge,
    ChannelKey,
    EnrollRequest,
    EnrollResponse,
    StatePackage,
    VerificationResult,
    session_of,
)

# Phase in which each role consumes a message type; later arrivals are repeats.
_CONSUMED_IN: dict[tuple[Role, type], Phase] = {
    (Role.SMN, ChannelKey): Phase.CHALLENGE_RECEIVED,
    (Role.TMN, ChannelKey): Phase.CHALLENGE_SENT,
    (Role.TMN, StatePackage): Phase.CHANNEL_ESTABLISHED,
}


@dataclass
class NodeConfig:
    """Validated contents of ``node.json``."""

    node_id: str
    registry_mode: str = DEFAULT_REGISTRY_MODE
    listen: str = DEFAULT_LISTEN
    provisioned: tuple[EnclaveMeasurement, ...] = ()
    certificate: Certificate | None = None
    orchestrator_key: bytes | None = None

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> NodeConfig:
        """Validate and convert a stored document."""
        conf = validate(NODE_SCHEMA, data, "node configuration")
        cert_hex = conf.get(CONF_CERTIFICATE)
        key_hex = conf.get(CONF_ORCHESTRATOR_KEY)
        try:
            certificate = Certificate.from_bytes(bytes.fromhex(cert_hex)) if cert_hex else None
        except TalosError as err:
            raise ConfigError(f"stored certificate: {err}") from err
        return cls(
            node_id=conf[CONF_NODE_ID],
            registry_mode=conf[CONF_REGISTRY_MODE],
            listen=conf[CONF_LISTEN],
            provisioned=tuple(EnclaveMeasurement.from_hex(m) for m in conf[CONF_PROVISIONED]),
            certificate=certificate,
            orchestrator_key=bytes.fromhex(key_hex) if key_hex else None,
        )

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON form."""
        data: dict[str, Any] = {
            CONF_NODE_ID: self.node_id,
            CONF_REGISTRY_MODE: self.registry_mode,
            CONF_LISTEN: self.listen,
            CONF_PROVISIONED: [m.hex() for m in self.provisioned],
        }
        if self.certificate is not None:
            data[CONF_CERTIFICATE] = self.certificate.to_bytes().hex()
        if self.orchestrator_key is not None:
            data[CONF_ORCHESTRATOR_KEY] = self.orchestrator_key.hex()
        return data


class MigrationNode:
    """Holds a node's identity, registry, apps and migration sessions.

    Protocol steps live in ``protocol``; this class owns the state they
    act on and dispatches incoming messages to them.
    """

    def __init__(
        self,
        config: NodeConfig,
        *,
        tee: TeeBackend,
        keypair: NodeKeyPair,
        registry: PigeonholeRegistry | None = None,
        nonces: NonceLog | None = None,
        store: NodeStore | None = None,
    ) -> None:
        """Initialize the node."""
        self.config = config
        self.tee = tee
        self.keypair = keypair
        self.store = store
        self.registry = registry or PigeonholeRegistry(
            config.registry_mode, config.provisioned
        )
        self.nonces = nonces or NonceLog()
        self.profiles: dict[EnclaveMeasurement, ApplicationProfile] = {}
        self.programs: dict[EnclaveMeasurement, GuestProgram] = {}
        self.guests: dict[EnclaveMeasurement, GuestInstance] = {}
        self.sealed: dict[EnclaveMeasurement, SealedBlob] = {}
        self.sessions: dict[bytes, MigrationSession] = {}
        self.launcher: Launcher = guest_launch
        self.timer_factory: Callable[[], StepTimer | None] = lambda: None
        self._awaiting_ack: set[bytes] = set()
        self._lock = threading.Lock()

    # --- construction ---

    @classmethod
    def create(
        cls,
        node_id: str,
        *,
        registry_mode: str = DEFAULT_REGISTRY_MODE,
        provisioned: Iterable[EnclaveMeasurement] = (),
        tee: TeeBackend | None = None,
    ) -> MigrationNode:
        """Build an in-memory node with fresh platform and node keys."""
        config = NodeConfig(node_id, registry_mode, provisioned=tuple(provisioned))
        return cls(config, tee=tee or MockTeeBackend.generate(), keypair=NodeKeyPair.generate())

    @classmethod
    def initialize(cls, store: NodeStore, config: NodeConfig) -> MigrationNode:
        """Create a node directory and return the node."""
        if store.config.load() is not None:
            raise ConfigError(f"{store.root} already holds a node")
        store.ensure()
        keypair = NodeKeyPair.generate()
        write_atomic(store.key_path, keypair.to_pem(), 0o600)
        store.config.save(config.to_dict())
        LOGGER.info("Initialized node %s in %s", config.node_id, store.root)
        return cls.from_store(store)

    @classmethod
    def from_store(cls, store: NodeStore) -> MigrationNode:
        """Load a node directory, replaying its registry and resuming apps."""
        data = store.config.load()
        if data is None:
            raise ConfigError(f"{store.root} holds no node configuration")
        config = NodeConfig.from_dict(data)
        store.ensure()
        tee = MockTeeBackend.load_or_create(store.root_secret_path, store.attestation_key_path)
        keypair = NodeKeyPair.from_pem(read_bytes(store.key_path))
        registry = PigeonholeRegistry(
            config.registry_mode, config.provisioned, journal_path=store.journal_path
        )
        node = cls(
            config,
            tee=tee,
            keypair=keypair,
            registry=registry,
            nonces=NonceLog(store.nonce_log_path),
            store=store,
        )
        node._load_installed()
        node._resume_active()
        return node

    def _load_installed(self) -> None:
        assert self.store is not None
        for m_hex, name, elf, script in self.store.installed_apps():
            program = GuestProgram.build(name, elf, script)
            if program.measurement.hex() != m_hex:
                LOGGER.warning("Installed app %s does not match its measurement", name)
                continue
            self.programs[program.measurement] = program
        for path in sorted(self.store.sealed_dir.glob("*.sealed")):
            m = EnclaveMeasurement.from_hex(path.stem)
            self.sealed[m] = SealedBlob.from_bytes(read_bytes(path))
        if self.orchestrator_key is None:
            return
        for m_hex, blob in self.store.profile_blobs().items():
            try:
                self.profiles[EnclaveMeasurement.from_hex(m_hex)] = SignedProfile.from_bytes(
                    blob
                ).verify(self.orchestrator_key)
            except TalosError as err:
                LOGGER.warning("Ignoring profile %s: %s", m_hex, err)

    def _resume_active(self) -> None:
        for measurement, entry in self.registry.snapshot().items():
            program = self.programs.get(measurement)
            if entry.status is not InstanceState.ACTIVE or program is None:
                continue
            profile = self.profiles.get(measurement)
            blob = self.sealed.get(measurement)
            try:
                if blob is not None and profile is not None:
                    state = volatile_deserialize(self.tee.unseal(blob))
                    instance = guest_launch(
                        program, state, marker=profile.resume_marker, tee=self.tee
                    )
                else:
                    instance = guest_launch(program, tee=self.tee)
            except TalosError as err:
                LOGGER.warning("Could not resume %s: %s", measurement, err)
                continue
            self.guests[measurement] = instance
            LOGGER.info("Resumed %s (%s)", program.name, measurement)

    # --- identity ---

    @property
    def node_id(self) -> str:
        """Return the node id."""
        return self.config.node_id

    @property
    def cert(self) -> Certificate:
        """Return the orchestrator-issued certificate."""
        if self.config.certificate is None:
            raise EnrollmentRejected(f"{self.node_id} is not enrolled")
        return self.config.certificate

    @cert.setter
    def cert(self, value: Certificate) -> None:
        self.config.certificate = value

    @property
    def orchestrator_key(self) -> bytes | None:
        """Return the trusted orchestrator public key."""
        return self.config.orchestrator_key

    @orchestrator_key.setter
    def orchestrator_key(self, value: bytes) -> None:
        self.config.orchestrator_key = value

    @property
    def enrolled(self) -> bool:
        """Return whether the node holds a certificate and orchestrator key."""
        return self.config.certificate is not None and self.orchestrator_key is not None

    def enrollment_request(self) -> EnrollRequest:
        """Quote the Migration Service with the node key bound in."""
        pubkey = self.keypair.public_bytes()
        quote = self.tee.quote(SERVICE_MEASUREMENT, enrollment_report_data(pubkey))
        return EnrollRequest(self.node_id, pubkey, quote)

    def apply_enrollment(self, response: EnrollResponse) -> None:
        """Store the certificate and orchestrator key from a response."""
        if not response.accepted or response.cert is None:
            raise EnrollmentRejected(response.error or "enrollment refused")
        if response.cert.subject_public_key != self.keypair.public_bytes():
            raise EnrollmentRejected("certificate names another key")
        self.cert = response.cert
        self.orchestrator_key = response.orchestrator_pubkey
        self.save_config()
        LOGGER.info("Node %s enrolled", self.node_id)

    def save_config(self) -> None:
        """Persist the node configuration if the node has a store."""
        if self.store is not None:
            self.store.config.save(self.config.to_dict())

    # --- apps and profiles ---

    def install_profile(self, signed: SignedProfile) -> ApplicationProfile:
        """Verify and install a signed application profile."""
        if self.orchestrator_key is None:
            raise EnrollmentRejected(f"{self.node_id} has no orchestrator key")
        profile = signed.verify(self.orchestrator_key)
        self.profiles[profile.measurement] = profile
        if self.store is not None:
            write_atomic(self.store.profile_path(profile.measurement.hex()), signed.to_bytes())
        return profile

    def install_program(self, program: GuestProgram) -> None:
        """Make a program available for launch or import."""
        program.verify_measurement()
        self.programs[program.measurement] = program
        if self.store is not None:
            self.store.install_app(
                program.measurement.hex(), program.name, program.elf_bytes, program.script_text
            )

    def launch(self, measurement: EnclaveMeasurement) -> GuestInstance:
        """Start an installed program on this node."""
        return launch_fresh(self, self.programs[measurement])

    def store_sealed(self, measurement: EnclaveMeasurement, blob: SealedBlob) -> None:
        """Keep the locally resealed state of an imported app."""
        self.sealed[measurement] = blob
        if self.store is not None:
            write_atomic(self.store.sealed_path(measurement.hex()), blob.to_bytes(), 0o600)

    def drop_sealed(self, measurement: EnclaveMeasurement) -> None:
        """Forget resealed state."""
        self.sealed.pop(measurement, None)
        if self.store is not None:
            self.store.remove(self.store.sealed_path(measurement.hex()))

    # --- migration ---

    def start_migration(self, measurement: EnclaveMeasurement) -> Challenge:
        """Open a pull session for measurement; this node is the target."""
        session, challenge = tmn_create_challenge(
            self, measurement, timer=self.timer_factory()
        )
        self._remember(session)
        return challenge

    def _remember(self, session: MigrationSession) -> None:
        """Store a new session and forget the oldest finished ones past the limit."""
        with self._lock:
            self.sessions[session.session_id] = session
            finished = [
                sid
                for sid, known in self.sessions.items()
                if known.phase.terminal and sid not in self._awaiting_ack
            ]
            for sid in finished[: max(0, len(finished) - MAX_FINISHED_SESSIONS)]:
                del self.sessions[sid]

    def session(self, session_id: bytes) -> MigrationSession | None:
        """Return a session by id."""
        with self._lock:
            return self.sessions.get(session_id)

    def handle_message(self, message: AnyMessage) -> list[AnyMessage]:
        """Process one incoming protocol message; return the replies."""
        session_id = session_of(message)
        if session_id is None:
            LOGGER.debug("Dropping %s without a session", type(message).__name__)
            return []
        if isinstance(message, Challenge):
            return self._handle_challenge(message)
        session = self.session(session_id)
        if session is None:
            if isinstance(message, Abort):
                return []
            LOGGER.warning("%s for unknown session %s", type(message).__name__, session_id.hex())
            return [Abort(session_id, AbortReason.PHASE_VIOLATION, "unknown session")]
        if isinstance(message, Abort):
            return self._handle_abort(session, message)
        if session.phase.terminal:
            return self._handle_after_end(session, message)
        consumed_in = _CONSUMED_IN.get((session.role, type(message)))
        if consumed_in is not None and session.phase.rank > consumed_in.rank:
            LOGGER.warning(
                "Ignoring repeated %s for session %s", type(message).__name__, session_id.hex()
            )
            return []
        try:
            if session.role is Role.SMN:
                return self._handle_as_source(session, message)
            return self._handle_as_target(session, message)
        except TalosError as err:
            LOGGER.warning(
                "Session %s aborted at %s: %s", session_id.hex(), session.phase, err
            )
            if session.role is Role.SMN and session.phase is Phase.AWAITING_DIGEST:
                return [self._abort_pending_teardown(session, err.reason, str(err))]
            return [abort_session(self, session, err.reason, str(err))]

    def _abort_pending_teardown(
        self, session: MigrationSession, reason: AbortReason, detail: str
    ) -> Abort:
        # The target may already be Active; restore once it has torn down.
        session.phase = Phase.ABORTED
        session.outcome = Outcome.ABORTED
        session.abort_reason = reason
        self._awaiting_ack.add(session.session_id)
        return Abort(session.session_id, reason, detail)

    def _handle_challenge(self, challenge: Challenge) -> list[AnyMessage]:
        if self.session(challenge.session_id) is not None:
            LOGGER.warning("Ignoring repeated challenge %s", challenge.session_id.hex())
            return []
        try:
            session = smn_handle_challenge(self, challenge, timer=self.timer_factory())
        except TalosError as err:
            LOGGER.warning("Rejected challenge %s: %s", challenge.session_id.hex(), err)
            return [Abort(challenge.session_id, err.reason, str(err))]
        self._remember(session)
        try:
            return [channel_offer(self, session)]
        except TalosError as err:
            return [abort_session(self, session, err.reason, str(err))]

    def _handle_as_source(
        self, session: MigrationSession, message: AnyMessage
    ) -> list[AnyMessage]:
        if isinstance(message, ChannelKey):
            establish_channel(self, session, message)
            return [smn_prepare_package(self, session)]
        if isinstance(message, AttestationDigest):
            outcome = smn_verify_and_finalize(self, session, message, restore_on_abort=False)
            if outcome is Outcome.ABORTED:
                # Restore only once the target confirms its teardown.
                self._awaiting_ack.add(session.session_id)
            return [VerificationResult(session.session_id, outcome is Outcome.CONFIRMED)]
        raise PhaseViolation(f"source cannot take {type(message).__name__}")

    def _handle_as_target(
        self, session: MigrationSession, message: AnyMessage
    ) -> list[AnyMessage]:
        if isinstance(message, ChannelKey):
            reply = establish_channel(self, session, message)
            return [reply] if reply is not None else []
        if isinstance(message, StatePackage):
            return [tmn_import(self, session, message, self.launcher)]
        if isinstance(message, VerificationResult):
            outcome = tmn_handle_verdict(self, session, message)
            if outcome is Outcome.ABORTED:
                return [self._teardown_ack(session)]
            return []
        raise PhaseViolation(f"target cannot take {type(message).__name__}")

    def _teardown_ack(self, session: MigrationSession) -> VerificationResult:
        return VerificationResult(session.session_id, False, teardown_tag(session))

    def _restore_on_ack(self, session: MigrationSession, tag: bytes) -> bool:
        if session.session_id not in self._awaiting_ack or not teardown_proven(session, tag):
            return False
        self._awaiting_ack.discard(session.session_id)
        smn_abort_restore(self, session)
        return True

    def _handle_after_end(
        self, session: MigrationSession, message: AnyMessage
    ) -> list[AnyMessage]:
        if (
            isinstance(message, VerificationResult)
            and not message.confirmed
            and self._restore_on_ack(session, message.tag)
        ):
            return []
        LOGGER.warning(
            "Ignoring %s for finished session %s", type(message).__name__, session.session_id.hex()
        )
        return []

    def _handle_abort(self, session: MigrationSession, message: Abort) -> list[AnyMessage]:
        LOGGER.warning(
            "Peer aborted session %s: %s %s",
            session.session_id.hex(),
            message.reason.name,
            message.detail,
        )
        if session.phase is Phase.VERIFIED:
            return []
        if session.role is Role.SMN:
            return self._source_abort(session, message)
        if not session.phase.terminal:
            abort_session(self, session, message.reason, message.detail)
        if session.keys is None:
            return []
        # Tell the source the import is gone.
        return [self._teardown_ack(session)]

    def _source_abort(self, session: MigrationSession, message: Abort) -> list[AnyMessage]:
        if session.phase.terminal:
            self._restore_on_ack(session, message.tag)
            return []
        if session.phase is Phase.AWAITING_DIGEST and not teardown_proven(session, message.tag):
            # The package is out; the target may be Active until it tears down.
            return [self._abort_pending_teardown(session, message.reason, message.detail)]
        abort_session(self, session, message.reason, message.detail)
        return []

    def stall(self, session_id: bytes) -> Abort | None:
        """Give up on a session whose peer went quiet."""
        session = self.session(session_id)
        if session is None or session.phase is Phase.VERIFIED:
            return None
        if session.phase.terminal:
            if session.session_id in self._awaiting_ack:
                self._awaiting_ack.discard(session.session_id)
                smn_abort_restore(self, session)
            return None
        LOGGER.warning("Session %s stalled at %s", session_id.hex(), session.phase)
        return abort_session(self, session, AbortReason.STALLED, "peer timed out")

    def __repr__(self) -> str:
        """Describe the node."""
        return f"MigrationNode({self.node_id}, guests={len(self.guests)})"

"""SMN and TMN migration state machines.

The four phases run as follows:

* Affinity. The TMN challenges, the SMN checks its certificate and claims
  the migration slot, and both sides exchange signed ephemeral keys.
* Export. The SMN pauses, externalizes, unseals and masks the app state,
  computes the persistent reference and draws a fresh nonce.
* Verifiable import. The TMN checks the source, unmasks, reseals and
  launches the app as a child, verifies its reload trace and answers with
  a keyed digest over its recomputed reference.
* Verification. The SMN compares the digest with its own expectation and
  either finalizes or restores the original instance.

Functions here are transport-free: they take and return wire messages and
mutate the node and session they are given.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
from enum import StrEnum
import hashlib
import hmac
from typing import TYPE_CHECKING

from .codec import lp
from .const import LOGGER, SESSION_ID_SIZE
from .crypto_channel import (
    Certificate,
    NodeKeyPair,
    Nonce,
    SessionKeys,
    cert_verify,
    derive_session_keys,
    ecdh_shared_secret,
    hmac_compute,
    hmac_verify,
    load_public_key,
    random_bytes,
    sign,
    verify_quietly,
)
from .elf_introspect import PersistentReference, introspect_reference
from .exceptions import (
    AbortReason,
    AppNotRunning,
    CertInvalid,
    GraphDeviationDetected,
    MarkerNotSeen,
    MigrationInProgress,
    PhaseViolation,
    ProfileMissing,
    SignatureInvalid,
    SourceCertInvalid,
    TalosError,
)
from .guest_model import GuestInstance, GuestProgram, RunState, guest_launch
from .registry import Direction, InstanceState
from .sccfg import DeviationKind, trace_until_marker, verify_reload
from .state_manager import (
    export_counter_offsets,
    externalize_state,
    mask_state,
    unmask_state,
    volatile_deserialize,
)
from .tee_sim import EnclaveMeasurement, SealPolicy, TeeBackend
from .timing import StepTimer, SubStep, maybe_measure
from .wire import (
    Abort,
    AttestationDigest,
    Challenge,
    ChannelKey,
    StatePackage,
    VerificationResult,
)

if TYPE_CHECKING:
    from .node import MigrationNode
    from .sccfg import SysCallGraph
    from .state_manager import VolatileState

type Launcher = Callable[..., GuestInstance]

_SMN_LABEL = b"smn"
_TMN_LABEL = b"tmn"
_TEARDOWN_LABEL = b"teardown"


class Role(StrEnum):
    """Side of a session."""

    SMN = "SMN"
    TMN = "TMN"


class Phase(StrEnum):
    """Session phase; ranks only ever increase."""

    CHALLENGE_SENT = "ChallengeSent"
    CHALLENGE_RECEIVED = "ChallengeReceived"
    CHANNEL_ESTABLISHED = "ChannelEstablished"
    PACKAGE_SENT = "PackageSent"
    PACKAGE_RECEIVED = "PackageReceived"
    AWAITING_DIGEST = "AwaitingDigest"
    VERIFIED = "Verified"
    ABORTED = "Aborted"

    @property
    def rank(self) -> int:
        """Return the position of the phase in protocol order."""
        return _PHASE_RANK[self]

    @property
    def terminal(self) -> bool:
        """Return whether no further transition is allowed."""
        return self in (Phase.VERIFIED, Phase.ABORTED)


_PHASE_RANK = {
    Phase.CHALLENGE_SENT: 0,
    Phase.CHALLENGE_RECEIVED: 0,
    Phase.CHANNEL_ESTABLISHED: 1,
    Phase.PACKAGE_SENT: 2,
    Phase.PACKAGE_RECEIVED: 2,
    Phase.AWAITING_DIGEST: 3,
    Phase.VERIFIED: 4,
    Phase.ABORTED: 5,
}


class Outcome(StrEnum):
    """Final result of a migration."""

    CONFIRMED = "Confirmed"
    ABORTED = "Aborted"


@dataclass
class MigrationSession:
    """One migration as seen by one node."""

    session_id: bytes
    role: Role
    measurement: EnclaveMeasurement
    phase: Phase
    peer_pubkey: bytes = b""
    peer_cert: Certificate | None = None
    challenge_bytes: bytes = b""
    ephemeral: NodeKeyPair | None = None
    smn_share: bytes = b""
    tmn_share: bytes = b""
    keys: SessionKeys | None = None
    nonce: Nonce | None = None
    reference: PersistentReference | None = None
    expected_digest: bytes = b""
    imported: GuestInstance | None = None
    outcome: Outcome | None = None
    abort_reason: AbortReason | None = None
    timer: StepTimer | None = field(default=None, repr=False)

    def require(self, *phases: Phase) -> None:
        """Raise PhaseViolation unless the session is in one of phases."""
        if self.phase not in phases:
            raise PhaseViolation(
                f"session {self.session_id.hex()} is {self.phase}, "
                f"expected {' or '.join(phases)}"
            )

    def advance(self, phase: Phase) -> None:
        """Move forward to phase."""
        if self.phase.terminal or phase.rank <= self.phase.rank:
            raise PhaseViolation(f"{self.phase} -> {phase} is not forward")
        LOGGER.debug("Session %s: %s -> %s", self.session_id.hex(), self.phase, phase)
        self.phase = phase

    def require_keys(self) -> SessionKeys:
        """Return the session keys, which exist only after the channel is up."""
        if self.keys is None:
            raise PhaseViolation("channel not established")
        return self.keys

    def transcript_hash(self) -> bytes:
        """Hash the challenge and both ephemeral shares."""
        return hashlib.sha256(
            lp(self.challenge_bytes) + lp(self.smn_share) + lp(self.tmn_share)
        ).digest()


def attestation_digest(mac_key: bytes, reference_digest: bytes, nonce: Nonce) -> bytes:
    """Return HMAC(mac_key, reference || nonce)."""
    return hmac_compute(mac_key, reference_digest + nonce.value)


def teardown_tag(session: MigrationSession) -> bytes:
    """Return the target's proof that it discarded the imported instance.

    Empty while no channel keys exist; nothing was imported then.
    """
    if session.keys is None:
        return b""
    return hmac_compute(session.keys.mac_key, _TEARDOWN_LABEL + session.session_id)


def teardown_proven(session: MigrationSession, tag: bytes) -> bool:
    """Check a teardown tag from the target."""
    if session.keys is None or not tag:
        return False
    return hmac_verify(session.keys.mac_key, _TEARDOWN_LABEL + session.session_id, tag)


def _check_peer_cert(node: MigrationNode, cert: Certificate, pubkey: bytes) -> None:
    if not cert_verify(node.orchestrator_key, cert):
        raise CertInvalid(f"certificate of {cert.subject_node_id!r} is not orchestrator-issued")
    if cert.subject_public_key != pubkey:
        raise CertInvalid(f"certificate of {cert.subject_node_id!r} names another key")


# --- affinity ---


def tmn_create_challenge(
    node: MigrationNode,
    measurement: EnclaveMeasurement,
    *,
    timer: StepTimer | None = None,
) -> tuple[MigrationSession, Challenge]:
    """Open a session asking the source to move measurement here."""
    session = MigrationSession(
        session_id=random_bytes(SESSION_ID_SIZE),
        role=Role.TMN,
        measurement=measurement,
        phase=Phase.CHALLENGE_SENT,
        timer=timer,
    )
    unsigned = Challenge(
        session.session_id, node.cert, node.keypair.public_bytes(), measurement, b""
    )
    challenge = Challenge(
        unsigned.session_id,
        unsigned.target_cert,
        unsigned.target_pubkey,
        measurement,
        sign(node.keypair, unsigned.signed_bytes()),
    )
    session.challenge_bytes = challenge.to_payload()
    LOGGER.debug("Challenge %s for %s", session.session_id.hex(), measurement)
    return session, challenge


def smn_handle_challenge(
    node: MigrationNode, challenge: Challenge, *, timer: StepTimer | None = None
) -> MigrationSession:
    """Authenticate a challenge and claim the outgoing migration slot."""
    with maybe_measure(timer, SubStep.VERIFY_TMN):
        _check_peer_cert(node, challenge.target_cert, challenge.target_pubkey)
        if not verify_quietly(
            challenge.target_pubkey, challenge.signed_bytes(), challenge.challenge_signature
        ):
            raise SignatureInvalid("challenge signature does not verify")
    measurement = challenge.requested_measurement
    guest = node.guests.get(measurement)
    if guest is None or not guest.is_running or not node.registry.is_active(measurement):
        entry = node.registry.status(measurement)
        if entry is not None and entry.status is InstanceState.MIGRATING_OUT:
            raise MigrationInProgress(str(measurement))
        raise AppNotRunning(str(measurement))
    if not node.registry.try_acquire_migration(
        measurement, challenge.session_id, Direction.OUT
    ):
        raise MigrationInProgress(str(measurement))
    LOGGER.info(
        "Migration %s of %s to %s accepted",
        challenge.session_id.hex(),
        measurement,
        challenge.target_cert.subject_node_id,
    )
    return MigrationSession(
        session_id=challenge.session_id,
        role=Role.SMN,
        measurement=measurement,
        phase=Phase.CHALLENGE_RECEIVED,
        peer_pubkey=challenge.target_pubkey,
        peer_cert=challenge.target_cert,
        challenge_bytes=challenge.to_payload(),
        timer=timer,
    )


def channel_offer(node: MigrationNode, session: MigrationSession) -> ChannelKey:
    """SMN: send a certified, signed ephemeral share."""
    session.require(Phase.CHALLENGE_RECEIVED)
    if session.ephemeral is not None:
        raise PhaseViolation("ephemeral key already offered")
    session.ephemeral = NodeKeyPair.generate()
    session.smn_share = session.ephemeral.public_bytes()
    signature = sign(node.keypair, _SMN_LABEL + session.challenge_bytes + session.smn_share)
    return ChannelKey(session.session_id, session.smn_share, node.cert, signature)


def establish_channel(
    node: MigrationNode, session: MigrationSession, peer: ChannelKey
) -> ChannelKey | None:
    """Complete the ephemeral exchange; the TMN returns its own share."""
    if peer.session_id != session.session_id:
        raise PhaseViolation("channel key for another session")
    if session.role is Role.TMN:
        session.require(Phase.CHALLENGE_SENT)
        if peer.cert is None:
            raise CertInvalid("source sent no certificate")
        _check_peer_cert(node, peer.cert, peer.cert.subject_public_key)
        load_public_key(peer.ephemeral_pubkey)
        if not verify_quietly(
            peer.cert.subject_public_key,
            _SMN_LABEL + session.challenge_bytes + peer.ephemeral_pubkey,
            peer.signature,
        ):
            raise SignatureInvalid("source key share signature does not verify")
        session.peer_cert = peer.cert
        session.peer_pubkey = peer.cert.subject_public_key
        session.ephemeral = NodeKeyPair.generate()
        session.smn_share = peer.ephemeral_pubkey
        session.tmn_share = session.ephemeral.public_bytes()
        reply = ChannelKey(
            session.session_id,
            session.tmn_share,
            None,
            sign(
                node.keypair,
                _TMN_LABEL + session.challenge_bytes + session.smn_share + session.tmn_share,
            ),
        )
    else:
        session.require(Phase.CHALLENGE_RECEIVED)
        if session.ephemeral is None:
            raise PhaseViolation("no key share offered yet")
        load_public_key(peer.ephemeral_pubkey)
        if not verify_quietly(
            session.peer_pubkey,
            _TMN_LABEL + session.challenge_bytes + session.smn_share + peer.ephemeral_pubkey,
            peer.signature,
        ):
            raise SignatureInvalid("target key share signature does not verify")
        session.tmn_share = peer.ephemeral_pubkey
        reply = None
    secret = ecdh_shared_secret(session.ephemeral, peer.ephemeral_pubkey)
    session.keys = derive_session_keys(secret, session.transcript_hash())
    session.advance(Phase.CHANNEL_ESTABLISHED)
    return reply


# --- export ---


def smn_prepare_package(node: MigrationNode, session: MigrationSession) -> StatePackage:
    """Pause, externalize, mask and package the app state."""
    session.require(Phase.CHANNEL_ESTABLISHED)
    keys = session.require_keys()
    profile = node.profiles.get(session.measurement)
    if profile is None:
        raise ProfileMissing(str(session.measurement))
    guest = node.guests[session.measurement]
    program = guest.program
    guest.pause()
    with maybe_measure(session.timer, SubStep.EXTRACT_APP_STATE):
        blob = externalize_state(guest, node.tee, SealPolicy.for_signer(program.signer))
        # Unsealing is the integrity check before transmission.
        plain = node.tee.unseal(blob)
    with maybe_measure(session.timer, SubStep.MASK_STATE):
        masked = mask_state(plain, keys)
    session.reference = introspect_reference(
        guest.loaded_elf, program.name, profile.reference_graph
    )
    session.nonce = node.nonces.issue()
    session.expected_digest = attestation_digest(
        keys.mac_key, session.reference.digest, session.nonce
    )
    session.advance(Phase.PACKAGE_SENT)
    package = StatePackage(
        session.session_id, masked, node.keypair.public_bytes(), node.cert, session.nonce
    )
    session.advance(Phase.AWAITING_DIGEST)
    return package


# --- verifiable import ---


def _verify_reload(instance: GuestInstance, graph: SysCallGraph, marker: str) -> None:
    prefix = trace_until_marker(instance.trace, marker)
    deviations = verify_reload(graph, prefix, marker)
    if not prefix.marker_seen:
        raise MarkerNotSeen(f"{instance.program.name} never emitted {marker!r}")
    unknown = [d for d in deviations if d.kind is not DeviationKind.MISSING_MANDATORY_PREFIX]
    if unknown:
        raise GraphDeviationDetected(unknown)


def tmn_import(
    node: MigrationNode,
    session: MigrationSession,
    package: StatePackage,
    launcher: Launcher = guest_launch,
) -> AttestationDigest:
    """Import the package, relaunch the app and attest to what runs."""
    session.require(Phase.CHANNEL_ESTABLISHED)
    keys = session.require_keys()
    if package.session_id != session.session_id:
        raise PhaseViolation("state package for another session")
    with maybe_measure(session.timer, SubStep.VERIFY_SMN):
        if (
            not cert_verify(node.orchestrator_key, package.source_cert)
            or package.source_cert.subject_public_key != package.source_pubkey
            or package.source_pubkey != session.peer_pubkey
        ):
            raise SourceCertInvalid("state package source does not verify")
    session.advance(Phase.PACKAGE_RECEIVED)
    measurement = session.measurement
    profile = node.profiles.get(measurement)
    program: GuestProgram | None = node.programs.get(measurement)
    if profile is None or program is None:
        raise ProfileMissing(str(measurement))
    if not node.registry.try_acquire_migration(measurement, session.session_id, Direction.IN):
        raise MigrationInProgress(str(measurement))
    instance: GuestInstance | None = None
    try:
        with maybe_measure(session.timer, SubStep.UNMASK_STATE):
            plain = unmask_state(package.masked, keys)
            state: VolatileState = volatile_deserialize(plain)
        node.store_sealed(
            measurement, node.tee.seal(SealPolicy.for_signer(program.signer), plain)
        )
        with maybe_measure(session.timer, SubStep.DUMP_APP_STATE):
            instance = launcher(
                program, state, marker=profile.resume_marker, tee=node.tee
            )
        with maybe_measure(session.timer, SubStep.SC_CFI):
            _verify_reload(instance, profile.reference_graph, profile.resume_marker)
        with maybe_measure(session.timer, SubStep.ELF_CONF):
            reference = introspect_reference(
                instance.loaded_elf, program.name, profile.reference_graph
            )
    except TalosError:
        if instance is not None:
            instance.terminate()
        node.registry.release(measurement, session.session_id)
        node.drop_sealed(measurement)
        raise
    session.reference = reference
    session.nonce = package.nonce
    session.imported = instance
    node.guests[measurement] = instance
    digest = attestation_digest(keys.mac_key, reference.digest, package.nonce)
    node.registry.activate_imported(measurement, session.session_id)
    LOGGER.debug(
        "Imported %s with %d counters", measurement, len(export_counter_offsets(state).offsets)
    )
    return AttestationDigest(session.session_id, digest)


# --- verification ---


def smn_abort_restore(node: MigrationNode, session: MigrationSession) -> None:
    """Give the instance back to the source after an aborted migration."""
    guest = node.guests.get(session.measurement)
    if guest is not None and guest.is_paused:
        guest.resume()
    entry = node.registry.status(session.measurement)
    if (
        entry is not None
        and entry.status is InstanceState.MIGRATING_OUT
        and entry.session_id == session.session_id
    ):
        node.registry.restore(session.measurement, session.session_id)
    LOGGER.warning("Migration %s aborted; source instance restored", session.session_id.hex())


def smn_verify_and_finalize(
    node: MigrationNode,
    session: MigrationSession,
    digest: AttestationDigest,
    *,
    restore_on_abort: bool = True,
) -> Outcome:
    """Check the target's digest, then finalize or abort."""
    session.require(Phase.AWAITING_DIGEST)
    matches = digest.session_id == session.session_id and hmac.compare_digest(
        session.expected_digest, digest.digest
    )
    if matches:
        guest = node.guests.pop(session.measurement)
        guest.terminate()
        node.registry.mark_migrated(session.measurement, session.session_id)
        session.advance(Phase.VERIFIED)
        session.outcome = Outcome.CONFIRMED
        LOGGER.info("Migration %s confirmed", session.session_id.hex())
        return Outcome.CONFIRMED
    session.advance(Phase.ABORTED)
    session.outcome = Outcome.ABORTED
    session.abort_reason = AbortReason.DIGEST_MISMATCH
    LOGGER.warning("Migration %s: attestation digest mismatch", session.session_id.hex())
    if restore_on_abort:
        smn_abort_restore(node, session)
    return Outcome.ABORTED


def tmn_teardown(node: MigrationNode, session: MigrationSession) -> None:
    """Remove an imported instance the source did not confirm."""
    measurement = session.measurement
    instance = session.imported
    if instance is not None and instance.run_state is not RunState.TERMINATED:
        instance.terminate()
    if node.guests.get(measurement) is instance:
        node.guests.pop(measurement, None)
    entry = node.registry.status(measurement)
    if entry is None:
        return
    if entry.status is InstanceState.ACTIVE and instance is not None:
        node.registry.retire(measurement)
    elif entry.status is InstanceState.MIGRATING_IN and entry.session_id == session.session_id:
        node.registry.release(measurement, session.session_id)
    node.drop_sealed(measurement)


def tmn_handle_verdict(
    node: MigrationNode, session: MigrationSession, result: VerificationResult
) -> Outcome:
    """Apply the source's verdict on the target."""
    if result.session_id != session.session_id:
        raise PhaseViolation("verdict for another session")
    session.require(Phase.PACKAGE_RECEIVED)
    if result.confirmed:
        session.advance(Phase.VERIFIED)
        session.outcome = Outcome.CONFIRMED
        LOGGER.info("Migration %s confirmed by source", session.session_id.hex())
        return Outcome.CONFIRMED
    tmn_teardown(node, session)
    session.advance(Phase.ABORTED)
    session.outcome = Outcome.ABORTED
    session.abort_reason = AbortReason.DIGEST_MISMATCH
    LOGGER.warning("Migration %s rejected by source; import torn down", session.session_id.hex())
    return Outcome.ABORTED


def abort_session(
    node: MigrationNode,
    session: MigrationSession,
    reason: AbortReason,
    detail: str = "",
) -> Abort:
    """Abort a session locally and return the Abort message for the peer."""
    if session.phase is Phase.VERIFIED:
        raise PhaseViolation("session already verified")
    tag = b""
    if session.role is Role.SMN:
        smn_abort_restore(node, session)
    else:
        tmn_teardown(node, session)
        tag = teardown_tag(session)
    if not session.phase.terminal:
        session.phase = Phase.ABORTED
    session.outcome = Outcome.ABORTED
    session.abort_reason = reason
    return Abort(session.session_id, reason, detail, tag)


def launch_fresh(
    node: MigrationNode, program: GuestProgram, *, tee: TeeBackend | None = None
) -> GuestInstance:
    """Start an app on its home node and register it Active."""
    instance = guest_launch(program, tee=tee or node.tee)
    try:
        node.registry.register_active(program.measurement)
    except TalosError:
        instance.terminate()
        raise
    node.programs[program.measurement] = program
    node.guests[program.measurement] = instance
    return instance

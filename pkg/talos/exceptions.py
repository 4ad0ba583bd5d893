"""Exceptions for the TALOS migration simulator."""

from __future__ import annotations

from enum import IntEnum
from typing import Any


class AbortReason(IntEnum):
    """Reason codes carried by Abort (0x7F) frames."""

    UNSPECIFIED = 0
    CERT_INVALID = 1
    SIGNATURE_INVALID = 2
    APP_NOT_RUNNING = 3
    MIGRATION_IN_PROGRESS = 4
    MAC_MISMATCH = 5
    SOURCE_CERT_INVALID = 6
    GRAPH_DEVIATION = 7
    MARKER_NOT_SEEN = 8
    PHASE_VIOLATION = 9
    MALFORMED_MESSAGE = 10
    INVALID_PEER_POINT = 11
    PROFILE_MISSING = 12
    DIGEST_MISMATCH = 13
    STALLED = 14
    INTERNAL = 15


class TalosError(Exception):
    """Base class for every error raised by the simulator."""

    reason: AbortReason = AbortReason.INTERNAL


class ConfigError(TalosError):
    """Configuration failed schema validation."""


class StorageError(TalosError):
    """A persisted file is unreadable or inconsistent."""


class BadMagic(TalosError):
    """Leading magic bytes do not identify the expected format."""

    reason = AbortReason.MALFORMED_MESSAGE


# --- tee_sim ---


class TeeError(TalosError):
    """Mock TEE primitive failure."""


class EmptyInput(TeeError):
    """Measurement requested over empty content."""


class UnsealAuthFailure(TeeError):
    """Sealed blob failed authentication."""


class PolicyMismatch(UnsealAuthFailure):
    """Sealed blob is bound to a different policy than requested."""


class SealFailure(TeeError):
    """Sealing could not be completed."""


class CounterOverflow(TeeError):
    """Monotonic counter reached its maximum value."""


class MalformedQuote(TeeError):
    """Attestation quote has the wrong shape."""


# --- crypto_channel ---


class CryptoChannelError(TalosError):
    """Session cryptography failure."""


class EntropyUnavailable(CryptoChannelError):
    """The operating system refused to supply randomness."""


class InvalidPeerPoint(CryptoChannelError):
    """Peer public key is not a usable curve point."""

    reason = AbortReason.INVALID_PEER_POINT


class MalformedSignature(CryptoChannelError):
    """Signature bytes are not a canonical DER ECDSA signature."""

    reason = AbortReason.SIGNATURE_INVALID


class MalformedCertificate(CryptoChannelError):
    """Certificate bytes or fields are invalid."""

    reason = AbortReason.CERT_INVALID


class DuplicateNodeId(CryptoChannelError):
    """A certificate was already issued for this node id."""


# --- elf_introspect ---


class ElfError(TalosError):
    """ELF parsing or introspection failure."""


class BadElfMagic(ElfError, BadMagic):
    """Input does not start with the ELF magic."""


class TruncatedHeader(ElfError):
    """Input ends inside a header."""


class OutOfBoundsOffset(ElfError):
    """A header points outside the file."""


class UnsupportedClass(ElfError):
    """Only ELF64 little-endian images are supported."""


class OverlappingSegments(ElfError):
    """Two loadable segments cover the same address."""


class CorruptStringTable(ElfError):
    """A name index falls outside its string table."""


class MissingTextSection(ElfError):
    """The image has no .text section."""


class FixtureSpecError(ElfError):
    """A fixture description line is invalid."""


# --- sccfg ---


class TraceError(TalosError):
    """System-call trace failure."""


class TraceTerminated(TraceError):
    """Event recorded after the trace was terminated."""


class TraceFormatError(TraceError):
    """Trace text or syscall name is malformed."""


# --- state_manager ---


class StateError(TalosError):
    """Volatile state handling failure."""


class MalformedState(StateError):
    """Serialized volatile state is truncated or inconsistent."""

    reason = AbortReason.MALFORMED_MESSAGE


class AppNotPaused(StateError):
    """State capture requested while the guest is not paused."""


class MacMismatch(StateError):
    """Masked state failed HMAC verification."""

    reason = AbortReason.MAC_MISMATCH


class DecryptFailure(StateError):
    """Masked state failed AEAD decryption."""

    reason = AbortReason.MAC_MISMATCH


class OffsetsAlreadyApplied(StateError):
    """Counter offsets were applied to this bank before."""


class UnknownCounterId(StateError):
    """Counter id is neither local nor carried by the offset table."""


class CounterBankNotFresh(StateError):
    """Counter offsets offered to a bank whose counters already moved."""


# --- pigeonhole registry ---


class RegistryError(TalosError):
    """Pigeonhole registry failure."""


class AlreadyActive(RegistryError):
    """Measurement already has a live instance."""


class NotProvisioned(RegistryError):
    """Static registry does not list the measurement."""


class SessionMismatch(RegistryError):
    """Transition requested by a session that does not hold the slot."""


class InvalidTransition(RegistryError):
    """Transition not allowed by the instance state machine."""


# --- protocol ---


class ProtocolError(TalosError):
    """Migration protocol failure."""


class BadFrameMagic(ProtocolError, BadMagic):
    """Frame does not start with the wire magic."""


class TruncatedFrame(ProtocolError):
    """Frame shorter than its header or declared payload."""

    reason = AbortReason.MALFORMED_MESSAGE


class LengthMismatch(ProtocolError):
    """Declared payload length disagrees with the frame."""

    reason = AbortReason.MALFORMED_MESSAGE


class MalformedPayload(ProtocolError):
    """Message payload cannot be decoded."""

    reason = AbortReason.MALFORMED_MESSAGE


class CertInvalid(ProtocolError):
    """Peer certificate is not issued by the orchestrator."""

    reason = AbortReason.CERT_INVALID


class SignatureInvalid(ProtocolError):
    """Peer signature does not verify."""

    reason = AbortReason.SIGNATURE_INVALID


class AppNotRunning(ProtocolError):
    """Requested measurement is not running on this node."""

    reason = AbortReason.APP_NOT_RUNNING


class MigrationInProgress(ProtocolError):
    """Another session already holds the migration slot."""

    reason = AbortReason.MIGRATION_IN_PROGRESS


class PhaseViolation(ProtocolError):
    """Operation attempted out of protocol order."""

    reason = AbortReason.PHASE_VIOLATION


class SourceCertInvalid(ProtocolError):
    """Source certificate in the state package does not verify."""

    reason = AbortReason.SOURCE_CERT_INVALID


class ProfileMissing(ProtocolError):
    """No verified application profile for the measurement."""

    reason = AbortReason.PROFILE_MISSING


class GraphDeviationDetected(ProtocolError):
    """Reload trace is not subsumed by the reference graph."""

    reason = AbortReason.GRAPH_DEVIATION

    def __init__(self, deviations: list[Any]) -> None:
        """Initialize with the offending deviations."""
        super().__init__(f"{len(deviations)} deviation(s): {deviations}")
        self.deviations = deviations


class MarkerNotSeen(ProtocolError):
    """Reload trace never reached the resume marker."""

    reason = AbortReason.MARKER_NOT_SEEN


class PeerTimeout(ProtocolError):
    """Peer sent nothing within the read timeout."""

    reason = AbortReason.STALLED


class PeerClosed(ProtocolError):
    """Peer closed the connection."""

    reason = AbortReason.STALLED


# --- guest model ---


class GuestError(TalosError):
    """Guest model failure."""


class MeasurementMismatch(GuestError):
    """Program content does not hash to its recorded measurement."""


class InvalidRunState(GuestError):
    """Guest operation not allowed in the current run state."""


class GuestScriptError(GuestError):
    """Guest script line is invalid."""


# --- orchestrator ---


class OrchestratorError(TalosError):
    """Enrollment or provisioning failure."""


class QuoteInvalid(OrchestratorError):
    """Enrollment quote does not verify under a trusted platform key."""


class MeasurementUnexpected(OrchestratorError):
    """Quote covers an unexpected Migration Service measurement."""


class NodeNotEnrolled(OrchestratorError):
    """Node id has no enrollment record."""


class MarkerMissingFromGraph(OrchestratorError):
    """Profile reference graph lacks the resume marker."""


class ProfileSignatureInvalid(OrchestratorError):
    """Profile bytes are not signed by the orchestrator."""


class EnrollmentRejected(OrchestratorError):
    """Orchestrator refused an enrollment request."""


# --- harness ---


class HarnessError(TalosError):
    """Security game or benchmark failure."""


class FixtureInitFailure(HarnessError):
    """Two-node fixture could not be brought up."""

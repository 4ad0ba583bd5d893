"""Wire frames and message payloads.

Frame: magic ``TALOS1`` | u8 type | u32-LE payload length | payload.
Unknown types decode to an `Opaque` message so newer peers can add types.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from enum import IntEnum
from typing import ClassVar

from .codec import ByteReader, lp, lp_str, u8, u32
from .const import (
    FRAME_HEADER_SIZE,
    HASH_SIZE,
    MAX_FRAME_PAYLOAD,
    MAX_NODE_ID_BYTES,
    NONCE_SIZE,
    SESSION_ID_SIZE,
    WIRE_MAGIC,
)
from .crypto_channel import Certificate, Nonce
from .exceptions import (
    AbortReason,
    BadFrameMagic,
    LengthMismatch,
    MalformedPayload,
    TalosError,
    TruncatedFrame,
)
from .state_manager import MaskedState
from .tee_sim import AttestationQuote, EnclaveMeasurement

MAX_FIELD = 4096


class MessageType(IntEnum):
    """Registered frame types."""

    CHALLENGE = 0x01
    CHANNEL_KEY = 0x02
    STATE_PACKAGE = 0x03
    ATTESTATION_DIGEST = 0x04
    VERIFICATION_RESULT = 0x05
    ENROLL_REQUEST = 0x10
    ENROLL_RESPONSE = 0x11
    ABORT = 0x7F


@dataclass(frozen=True)
class Frame:
    """One framed message."""

    msg_type: int
    payload: bytes

    def encode(self) -> bytes:
        """Return the frame bytes."""
        return WIRE_MAGIC + u8(self.msg_type) + u32(len(self.payload)) + self.payload


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    """Frame a payload."""
    return Frame(msg_type, payload).encode()


def parse_header(header: bytes) -> tuple[int, int]:
    """Validate an 11-byte header and return (type, payload length)."""
    if len(header) < FRAME_HEADER_SIZE:
        raise TruncatedFrame(f"header of {len(header)} bytes")
    if header[: len(WIRE_MAGIC)] != WIRE_MAGIC:
        raise BadFrameMagic(f"bad frame magic {header[: len(WIRE_MAGIC)]!r}")
    msg_type = header[len(WIRE_MAGIC)]
    length = int.from_bytes(header[len(WIRE_MAGIC) + 1 : FRAME_HEADER_SIZE], "little")
    if length > MAX_FRAME_PAYLOAD:
        raise LengthMismatch(f"payload length {length} exceeds limit")
    return msg_type, length


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one frame."""
    msg_type, length = parse_header(data[:FRAME_HEADER_SIZE])
    available = len(data) - FRAME_HEADER_SIZE
    if available < length:
        raise TruncatedFrame(f"payload needs {length} bytes, have {available}")
    if available > length:
        raise LengthMismatch(f"{available - length} bytes after payload")
    return Frame(msg_type, bytes(data[FRAME_HEADER_SIZE:]))


def _reader(payload: bytes) -> ByteReader:
    return ByteReader(payload, MalformedPayload)


def _teardown_tag(reader: ByteReader) -> bytes:
    """Read the optional trailing teardown tag and finish the payload."""
    if reader.remaining == 0:
        return b""
    tag = reader.take(HASH_SIZE)
    reader.finish()
    return tag


def _nested[T](parse: Callable[[bytes], T], data: bytes, what: str) -> T:
    try:
        return parse(data)
    except TalosError as err:
        raise MalformedPayload(f"{what}: {err}") from err


class Message:
    """Base for typed payloads."""

    MSG_TYPE: ClassVar[MessageType]

    def to_payload(self) -> bytes:
        """Encode the payload."""
        raise NotImplementedError

    def to_frame(self) -> bytes:
        """Encode the full frame."""
        return encode_frame(self.MSG_TYPE, self.to_payload())


@dataclass(frozen=True)
class Challenge(Message):
    """TMN request to migrate a measurement to it."""

    MSG_TYPE: ClassVar[MessageType] = MessageType.CHALLENGE

    session_id: bytes
    target_cert: Certificate
    target_pubkey: bytes
    requested_measurement: EnclaveMeasurement
    challenge_signature: bytes

    def signed_bytes(self) -> bytes:
        """Return the bytes the TMN signs."""
        return self.requested_measurement.digest + self.session_id

    def to_payload(self) -> bytes:
        """Encode the payload."""
        return (
            self.session_id
            + lp(self.target_cert.to_bytes())
            + lp(self.target_pubkey)
            + self.requested_measurement.digest
            + lp(self.challenge_signature)
        )

    @classmethod
    def from_payload(cls, payload: bytes) -> Challenge:
        """Decode the payload."""
        reader = _reader(payload)
        session_id = reader.take(SESSION_ID_SIZE)
        cert = _nested(Certificate.from_bytes, reader.lp(MAX_FIELD), "certificate")
        pubkey = reader.lp(MAX_FIELD)
        measurement = EnclaveMeasurement(reader.take(HASH_SIZE))
        signature = reader.lp(MAX_FIELD)
        reader.finish()
        return cls(session_id, cert, pubkey, measurement, signature)


@dataclass(frozen=True)
class ChannelKey(Message):
    """Signed ephemeral key share; the SMN's carries its certificate."""

    MSG_TYPE: ClassVar[MessageType] = MessageType.CHANNEL_KEY

    session_id: bytes
    ephemeral_pubkey: bytes
    cert: Certificate | None
    signature: bytes

    def to_payload(self) -> bytes:
        """Encode the payload."""
        cert = self.cert.to_bytes() if self.cert is not None else b""
        return (
            self.session_id + lp(self.ephemeral_pubkey) + lp(cert) + lp(self.signature)
        )

    @classmethod
    def from_payload(cls, payload: bytes) -> ChannelKey:
        """Decode the payload."""
        reader = _reader(payload)
        session_id = reader.take(SESSION_ID_SIZE)
        ephemeral = reader.lp(MAX_FIELD)
        raw_cert = reader.lp(MAX_FIELD)
        signature = reader.lp(MAX_FIELD)
        reader.finish()
        cert = _nested(Certificate.from_bytes, raw_cert, "certificate") if raw_cert else None
        return cls(session_id, ephemeral, cert, signature)


@dataclass(frozen=True)
class StatePackage(Message):
    """Masked volatile state with the source's credentials and nonce."""

    MSG_TYPE: ClassVar[MessageType] = MessageType.STATE_PACKAGE

    session_id: bytes
    masked: MaskedState
    source_pubkey: bytes
    source_cert: Certificate
    nonce: Nonce

    def to_payload(self) -> bytes:
        """Encode the payload."""
        return (
            self.session_id
            + lp(self.masked.to_bytes())
            + lp(self.source_pubkey)
            + lp(self.source_cert.to_bytes())
            + self.nonce.value
        )

    @classmethod
    def from_payload(cls, payload: bytes) -> StatePackage:
        """Decode the payload."""
        reader = _reader(payload)
        session_id = reader.take(SESSION_ID_SIZE)
        masked = _nested(MaskedState.from_bytes, reader.lp(), "masked state")
        pubkey = reader.lp(MAX_FIELD)
        cert = _nested(Certificate.from_bytes, reader.lp(MAX_FIELD), "certificate")
        nonce = Nonce(reader.take(NONCE_SIZE))
        reader.finish()
        return cls(session_id, masked, pubkey, cert, nonce)


@dataclass(frozen=True)
class AttestationDigest(Message):
    """Target's keyed digest over its recomputed reference and the nonce."""

    MSG_TYPE: ClassVar[MessageType] = MessageType.ATTESTATION_DIGEST

    session_id: bytes
    digest: bytes

    def to_payload(self) -> bytes:
        """Encode the payload."""
        return self.session_id + self.digest

    @classmethod
    def from_payload(cls, payload: bytes) -> AttestationDigest:
        """Decode the payload."""
        reader = _reader(payload)
        session_id = reader.take(SESSION_ID_SIZE)
        digest = reader.take(HASH_SIZE)
        reader.finish()
        return cls(session_id, digest)


@dataclass(frozen=True)
class VerificationResult(Message):
    """Source verdict, echoed back by the target as acknowledgement."""

    MSG_TYPE: ClassVar[MessageType] = MessageType.VERIFICATION_RESULT

    session_id: bytes
    confirmed: bool
    tag: bytes = b""

    def to_payload(self) -> bytes:
        """Encode the payload."""
        return self.session_id + u8(1 if self.confirmed else 0) + self.tag

    @classmethod
    def from_payload(cls, payload: bytes) -> VerificationResult:
        """Decode the payload."""
        reader = _reader(payload)
        session_id = reader.take(SESSION_ID_SIZE)
        verdict = reader.u8()
        tag = _teardown_tag(reader)
        if verdict > 1:
            raise MalformedPayload(f"verdict byte {verdict}")
        return cls(session_id, verdict == 1, tag)


@dataclass(frozen=True)
class EnrollRequest(Message):
    """Node asks the orchestrator for a certificate."""

    MSG_TYPE: ClassVar[MessageType] = MessageType.ENROLL_REQUEST

    node_id: str
    node_pubkey: bytes
    quote: AttestationQuote

    def to_payload(self) -> bytes:
        """Encode the payload."""
        return lp_str(self.node_id) + lp(self.node_pubkey) + lp(self.quote.to_bytes())

    @classmethod
    def from_payload(cls, payload: bytes) -> EnrollRequest:
        """Decode the payload."""
        reader = _reader(payload)
        node_id = reader.lp_str(MAX_NODE_ID_BYTES)
        pubkey = reader.lp(MAX_FIELD)
        quote = _nested(AttestationQuote.from_bytes, reader.lp(MAX_FIELD), "quote")
        reader.finish()
        return cls(node_id, pubkey, quote)


@dataclass(frozen=True)
class EnrollResponse(Message):
    """Orchestrator answer: certificate and its public key, or an error."""

    MSG_TYPE: ClassVar[MessageType] = MessageType.ENROLL_RESPONSE

    accepted: bool
    cert: Certificate | None = None
    orchestrator_pubkey: bytes = b""
    error: str = ""

    def to_payload(self) -> bytes:
        """Encode the payload."""
        cert = self.cert.to_bytes() if self.cert is not None else b""
        return (
            u8(1 if self.accepted else 0)
            + lp(cert)
            + lp(self.orchestrator_pubkey)
            + lp_str(self.error)
        )

    @classmethod
    def from_payload(cls, payload: bytes) -> EnrollResponse:
        """Decode the payload."""
        reader = _reader(payload)
        accepted = reader.u8() == 1
        raw_cert = reader.lp(MAX_FIELD)
        pubkey = reader.lp(MAX_FIELD)
        error = reader.lp_str(MAX_FIELD)
        reader.finish()
        cert = _nested(Certificate.from_bytes, raw_cert, "certificate") if raw_cert else None
        return cls(accepted, cert, pubkey, error)


@dataclass(frozen=True)
class Abort(Message):
    """Either side ends the session with a reason code."""

    MSG_TYPE: ClassVar[MessageType] = MessageType.ABORT

    session_id: bytes
    reason: AbortReason
    detail: str = ""
    tag: bytes = b""

    def to_payload(self) -> bytes:
        """Encode the payload."""
        return (
            self.session_id
            + u8(self.reason)
            + lp_str(self.detail[:MAX_FIELD])
            + self.tag
        )

    @classmethod
    def from_payload(cls, payload: bytes) -> Abort:
        """Decode the payload."""
        reader = _reader(payload)
        session_id = reader.take(SESSION_ID_SIZE)
        code = reader.u8()
        detail = reader.lp_str(MAX_FIELD)
        tag = _teardown_tag(reader)
        try:
            reason = AbortReason(code)
        except ValueError:
            reason = AbortReason.UNSPECIFIED
        return cls(session_id, reason, detail, tag)


@dataclass(frozen=True)
class Opaque:
    """Frame of a type this version does not know."""

    msg_type: int
    payload: bytes

    def to_frame(self) -> bytes:
        """Encode the full frame unchanged."""
        return encode_frame(self.msg_type, self.payload)


type AnyMessage = (
    Challenge
    | ChannelKey
    | StatePackage
    | AttestationDigest
    | VerificationResult
    | EnrollRequest
    | EnrollResponse
    | Abort
    | Opaque
)

MESSAGE_CLASSES: dict[int, type[Message]] = {
    cls.MSG_TYPE: cls
    for cls in (
        Challenge,
        ChannelKey,
        StatePackage,
        AttestationDigest,
        VerificationResult,
        EnrollRequest,
        EnrollResponse,
        Abort,
    )
}


def decode_payload(frame: Frame) -> AnyMessage:
    """Turn a frame into its typed message."""
    cls = MESSAGE_CLASSES.get(frame.msg_type)
    if cls is None:
        return Opaque(frame.msg_type, frame.payload)
    return cls.from_payload(frame.payload)  # type: ignore[attr-defined]


def encode_message(message: Message | Opaque) -> bytes:
    """Encode a message as a frame."""
    return message.to_frame()


def decode_message(data: bytes) -> AnyMessage:
    """Decode one frame into its typed message."""
    return decode_payload(decode_frame(data))


def session_of(message: AnyMessage) -> bytes | None:
    """Return the session id a message belongs to, if it has one."""
    return getattr(message, "session_id", None)

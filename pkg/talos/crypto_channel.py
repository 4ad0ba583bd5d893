"""Session cryptography for the migration channel.

One curve (NIST P-256) serves both key agreement and signatures. Public
keys travel in compressed X9.62 form, signatures as DER ECDSA-SHA256.
Session keys come out of HKDF-SHA256 keyed by the ECDH secret and bound
to the handshake transcript.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
import hmac
import os
from pathlib import Path
import threading
import time

from cryptography.exceptions import InvalidSignature, UnsupportedAlgorithm
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import decode_dss_signature
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .codec import ByteReader, lp, lp_str, u64
from .const import HASH_SIZE, LOGGER, MAX_NODE_ID_BYTES, MAX_SIGNATURE_SIZE, NONCE_SIZE
from .exceptions import (
    CryptoChannelError,
    DuplicateNodeId,
    EntropyUnavailable,
    InvalidPeerPoint,
    MalformedCertificate,
    MalformedSignature,
    StorageError,
)

CURVE = ec.SECP256R1()
PUBLIC_KEY_SIZE = 33

type PublicKeyLike = ec.EllipticCurvePublicKey | bytes


def random_bytes(size: int) -> bytes:
    """Return size bytes from the operating system entropy source."""
    try:
        return os.urandom(size)
    except (NotImplementedError, OSError) as err:
        raise EntropyUnavailable(str(err)) from err


@dataclass(frozen=True, repr=False)
class NodeKeyPair:
    """Long-term or ephemeral P-256 key pair."""

    private_key: ec.EllipticCurvePrivateKey

    @classmethod
    def generate(cls) -> NodeKeyPair:
        """Generate a fresh key pair."""
        try:
            return cls(ec.generate_private_key(CURVE))
        except (NotImplementedError, OSError) as err:
            raise EntropyUnavailable(str(err)) from err

    @classmethod
    def from_pem(cls, data: bytes) -> NodeKeyPair:
        """Load a PKCS#8 PEM private key."""
        try:
            key = serialization.load_pem_private_key(data, password=None)
        except (ValueError, TypeError, UnsupportedAlgorithm) as err:
            raise StorageError(f"unreadable private key: {err}") from err
        if not isinstance(key, ec.EllipticCurvePrivateKey) or key.curve.name != CURVE.name:
            raise StorageError("private key is not a P-256 key")
        return cls(key)

    def to_pem(self) -> bytes:
        """Serialize the private key as unencrypted PKCS#8 PEM."""
        return self.private_key.private_bytes(
            encoding=serialization.Encoding.PEM,
            format=serialization.PrivateFormat.PKCS8,
            encryption_algorithm=serialization.NoEncryption(),
        )

    @property
    def public_key(self) -> ec.EllipticCurvePublicKey:
        """Return the public half."""
        return self.private_key.public_key()

    def public_bytes(self) -> bytes:
        """Return the compressed public point."""
        return encode_public_key(self.public_key)

    def __repr__(self) -> str:
        """Describe the key pair by its public point only."""
        return f"NodeKeyPair(public={self.public_bytes().hex()[:16]}...)"


def keypair_generate() -> NodeKeyPair:
    """Generate a node key pair."""
    return NodeKeyPair.generate()


def encode_public_key(key: ec.EllipticCurvePublicKey) -> bytes:
    """Encode a public key as a compressed point."""
    return key.public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
    )


def load_public_key(data: PublicKeyLike) -> ec.EllipticCurvePublicKey:
    """Decode and validate a peer public point."""
    if isinstance(data, ec.EllipticCurvePublicKey):
        return data
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(CURVE, bytes(data))
    except (ValueError, TypeError) as err:
        raise InvalidPeerPoint(f"invalid P-256 point: {err}") from err


def ecdh_shared_secret(mine: NodeKeyPair, theirs: PublicKeyLike) -> bytes:
    """Compute the 32-byte ECDH shared secret."""
    peer = load_public_key(theirs)
    try:
        return mine.private_key.exchange(ec.ECDH(), peer)
    except ValueError as err:
        raise InvalidPeerPoint(str(err)) from err


def hkdf_sha256(secret: bytes, info: bytes, length: int = 32) -> bytes:
    """Derive length bytes from secret under the context string info."""
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=None, info=info).derive(
        secret
    )


@dataclass(frozen=True, repr=False)
class SessionKeys:
    """Symmetric keys for one migration session."""

    shared_secret: bytes
    enc_key: bytes
    mac_key: bytes

    def __repr__(self) -> str:
        """Hide key material."""
        return "SessionKeys(<redacted>)"


def derive_session_keys(shared_secret: bytes, transcript_hash: bytes) -> SessionKeys:
    """Derive encryption and MAC keys bound to the handshake transcript."""
    if len(shared_secret) != HASH_SIZE or len(transcript_hash) != HASH_SIZE:
        raise CryptoChannelError("shared secret and transcript hash must be 32 bytes")
    return SessionKeys(
        shared_secret=shared_secret,
        enc_key=hkdf_sha256(shared_secret, b"enc" + transcript_hash),
        mac_key=hkdf_sha256(shared_secret, b"mac" + transcript_hash),
    )


def hmac_compute(key: bytes, message: bytes) -> bytes:
    """Return HMAC-SHA256 of message."""
    return hmac.new(key, message, hashlib.sha256).digest()


def hmac_verify(key: bytes, message: bytes, tag: bytes) -> bool:
    """Compare an HMAC-SHA256 tag in constant time."""
    return hmac.compare_digest(hmac_compute(key, message), tag)


def sign(key: NodeKeyPair, message: bytes) -> bytes:
    """Sign message with ECDSA-SHA256."""
    return key.private_key.sign(message, ec.ECDSA(hashes.SHA256()))


def signature_verify(public_key: PublicKeyLike, message: bytes, signature: bytes) -> bool:
    """Verify an ECDSA-SHA256 signature.

    Raises MalformedSignature when the bytes are not a DER signature at all;
    a well-formed signature that does not match yields False.
    """
    if not 8 <= len(signature) <= MAX_SIGNATURE_SIZE:
        raise MalformedSignature(f"signature length {len(signature)} out of range")
    try:
        decode_dss_signature(signature)
    except ValueError as err:
        raise MalformedSignature(str(err)) from err
    key = load_public_key(public_key)
    try:
        key.verify(signature, message, ec.ECDSA(hashes.SHA256()))
    except InvalidSignature:
        return False
    return True


def verify_quietly(public_key: PublicKeyLike, message: bytes, signature: bytes) -> bool:
    """Verify a signature, treating any malformed input as a failed check."""
    try:
        return signature_verify(public_key, message, signature)
    except CryptoChannelError:
        return False


@dataclass(frozen=True)
class Certificate:
    """Orchestrator-signed binding of a node id to a public key."""

    subject_public_key: bytes
    subject_node_id: str
    issued_at: int
    orchestrator_signature: bytes = b""

    def subject_bytes(self) -> bytes:
        """Return the canonical encoding of the signed fields."""
        return (
            lp(self.subject_public_key)
            + lp_str(self.subject_node_id)
            + lp(u64(self.issued_at))
        )

    def to_bytes(self) -> bytes:
        """Serialize subject fields followed by the signature."""
        return self.subject_bytes() + lp(self.orchestrator_signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> Certificate:
        """Parse the wire form."""
        reader = ByteReader(data, MalformedCertificate)
        public_key = reader.lp(max_size=133)
        node_id = reader.lp_str(max_size=MAX_NODE_ID_BYTES)
        issued_raw = reader.lp(max_size=8)
        if len(issued_raw) != 8:
            raise MalformedCertificate("issued_at must be 8 bytes")
        signature = reader.lp(max_size=MAX_SIGNATURE_SIZE)
        reader.finish()
        if not node_id:
            raise MalformedCertificate("empty node id")
        return cls(
            subject_public_key=public_key,
            subject_node_id=node_id,
            issued_at=int.from_bytes(issued_raw, "little"),
            orchestrator_signature=signature,
        )


def cert_issue(
    orchestrator_key: NodeKeyPair,
    subject_public_key: bytes,
    node_id: str,
    *,
    issued_at: int | None = None,
    issued_ids: frozenset[str] | set[str] = frozenset(),
) -> Certificate:
    """Issue a certificate for node_id."""
    if not node_id or len(node_id.encode()) > MAX_NODE_ID_BYTES:
        raise MalformedCertificate(f"node id must be 1..{MAX_NODE_ID_BYTES} bytes")
    if node_id in issued_ids:
        raise DuplicateNodeId(node_id)
    try:
        load_public_key(subject_public_key)
    except InvalidPeerPoint as err:
        raise MalformedCertificate(f"subject key: {err}") from err
    unsigned = Certificate(
        subject_public_key=bytes(subject_public_key),
        subject_node_id=node_id,
        issued_at=int(time.time()) if issued_at is None else issued_at,
    )
    return Certificate(
        subject_public_key=unsigned.subject_public_key,
        subject_node_id=unsigned.subject_node_id,
        issued_at=unsigned.issued_at,
        orchestrator_signature=sign(orchestrator_key, unsigned.subject_bytes()),
    )


def cert_verify(orchestrator_public_key: PublicKeyLike, cert: Certificate) -> bool:
    """Return whether cert was signed by the orchestrator key."""
    return verify_quietly(
        orchestrator_public_key, cert.subject_bytes(), cert.orchestrator_signature
    )


@dataclass(frozen=True)
class Nonce:
    """Per-session freshness value."""

    value: bytes

    @classmethod
    def generate(cls) -> Nonce:
        """Draw a fresh random nonce."""
        return cls(random_bytes(NONCE_SIZE))


@dataclass
class NonceLog:
    """Append-only record of the nonces a node has issued."""

    path: Path | None = None
    _seen: set[bytes] = field(default_factory=set, init=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False)

    def __post_init__(self) -> None:
        """Load previously issued nonces."""
        if self.path is None or not self.path.exists():
            return
        for line in self.path.read_text().splitlines():
            try:
                self._seen.add(bytes.fromhex(line.strip()))
            except ValueError:
                LOGGER.warning("Skipping unreadable nonce log line in %s", self.path)

    def issue(self) -> Nonce:
        """Draw a nonce never issued before and record it."""
        with self._lock:
            nonce = Nonce.generate()
            while nonce.value in self._seen:
                nonce = Nonce.generate()
            if self.path is not None:
                try:
                    with self.path.open("a") as log:
                        log.write(nonce.value.hex() + "\n")
                except OSError as err:
                    raise StorageError(f"cannot record nonce in {self.path}: {err}") from err
            self._seen.add(nonce.value)
            return nonce

    def __contains__(self, value: object) -> bool:
        """Return whether a nonce value was issued."""
        if isinstance(value, Nonce):
            value = value.value
        return value in self._seen

    def __len__(self) -> int:
        """Return how many nonces were issued."""
        return len(self._seen)

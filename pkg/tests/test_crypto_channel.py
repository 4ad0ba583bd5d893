"""Tests for the session cryptography."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
import random
from unittest.mock import patch

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec
import pytest

from talos.crypto_channel import (
    CURVE,
    Certificate,
    NodeKeyPair,
    NonceLog,
    cert_issue,
    cert_verify,
    derive_session_keys,
    ecdh_shared_secret,
    hmac_compute,
    hmac_verify,
    keypair_generate,
    load_public_key,
    random_bytes,
    sign,
    signature_verify,
)
from talos.exceptions import (
    CryptoChannelError,
    DuplicateNodeId,
    EntropyUnavailable,
    InvalidPeerPoint,
    MalformedCertificate,
    MalformedSignature,
    StorageError,
)

from .conftest import MOCK_NODE_ID

# NIST CAVS ECDH P-256, first vector.
KAT_PRIVATE = "7d7dc5f71eb29ddaf80d6214632eeae03d9058af1fb6d22ed80badb62bc1a534"
KAT_PUBLIC = (
    "04ead218590119e8876b29146ff89ca61770c4edbbf97d38ce385ed281d8a6b230"
    "28af61281fd35e2fa7002523acc85a429cb06ee6648325389f59edfce1405141"
)
KAT_PEER = (
    "04700c48f77f56584c5cc632ca65640db91b6bacce3a4df6b42ce7cc838833d287"
    "db71e509e3fd9b060ddb20ba5c51dcc5948d46fbf640dfe0441782cab85fa4ac"
)
KAT_SHARED = "46fc62106420ff012e54a434fbdd2d25ccc5852060561e68040dd7778997bd7b"

# RFC 4231 test case 1.
HMAC_KEY = b"\x0b" * 20
HMAC_TAG = "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"


def test_keypair_generate() -> None:
    """Test key pairs are fresh, consistent and survive the wire encoding."""
    first = keypair_generate()
    second = keypair_generate()
    assert first.private_key.private_numbers() != second.private_key.private_numbers()
    scalar = first.private_key.private_numbers().private_value
    recomputed = ec.derive_private_key(scalar, CURVE).public_key()
    assert recomputed.public_numbers() == first.public_key.public_numbers()
    assert len(first.public_bytes()) == 33
    assert load_public_key(first.public_bytes()).public_numbers() == first.public_key.public_numbers()


def test_keypair_entropy_unavailable() -> None:
    """Test an entropy failure is reported as EntropyUnavailable."""
    with (
        patch("talos.crypto_channel.os.urandom", side_effect=NotImplementedError("no rng")),
        pytest.raises(EntropyUnavailable),
    ):
        random_bytes(32)


def test_keypair_pem_round_trip(tmp_path: Path) -> None:
    """Test a key pair survives PEM storage."""
    key = NodeKeyPair.generate()
    path = tmp_path / "key.pem"
    path.write_bytes(key.to_pem())
    assert NodeKeyPair.from_pem(path.read_bytes()).public_bytes() == key.public_bytes()
    with pytest.raises(StorageError):
        NodeKeyPair.from_pem(b"not a key")


def test_ecdh_known_answer() -> None:
    """Test ECDH against a published P-256 vector."""
    mine = NodeKeyPair(ec.derive_private_key(int(KAT_PRIVATE, 16), CURVE))
    public = mine.public_key.public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint
    )
    assert public.hex() == KAT_PUBLIC
    assert ecdh_shared_secret(mine, bytes.fromhex(KAT_PEER)).hex() == KAT_SHARED


def test_ecdh_symmetry() -> None:
    """Test both sides derive the same secret."""
    for _ in range(1000):
        a, b = NodeKeyPair.generate(), NodeKeyPair.generate()
        assert ecdh_shared_secret(a, b.public_bytes()) == ecdh_shared_secret(b, a.public_bytes())


@pytest.mark.parametrize("point", [b"\x00", b"\x04" + bytes(64), b"\x02" + b"\xff" * 32, b""])
def test_ecdh_invalid_point(point: bytes) -> None:
    """Test the identity and off-curve points are rejected."""
    with pytest.raises(InvalidPeerPoint):
        ecdh_shared_secret(NodeKeyPair.generate(), point)


def test_derive_session_keys() -> None:
    """Test keys are deterministic, separated and bound to the transcript."""
    secret = bytes(range(32))
    keys = derive_session_keys(secret, bytes(32))
    again = derive_session_keys(secret, bytes(32))
    other = derive_session_keys(secret, b"\x01" * 32)
    assert (keys.enc_key, keys.mac_key) == (again.enc_key, again.mac_key)
    assert keys.enc_key != keys.mac_key
    assert keys.enc_key != other.enc_key
    assert keys.mac_key != other.mac_key
    assert secret.hex() not in repr(keys)
    with pytest.raises(CryptoChannelError):
        derive_session_keys(secret[:16], bytes(32))


def test_hmac_known_answer() -> None:
    """Test HMAC-SHA256 against a published vector."""
    assert hmac_compute(HMAC_KEY, b"Hi There").hex() == HMAC_TAG


def test_hmac_single_bit_mutations() -> None:
    """Test no single-bit change of message or tag verifies."""
    rng = random.Random(0)
    key = bytes(range(32))
    message = bytes(rng.randrange(256) for _ in range(64))
    tag = hmac_compute(key, message)
    assert hmac_verify(key, message, tag)
    for _ in range(10_000):
        if rng.random() < 0.5:
            mutated = bytearray(message)
            mutated[rng.randrange(len(mutated))] ^= 1 << rng.randrange(8)
            assert not hmac_verify(key, bytes(mutated), tag)
        else:
            mutated = bytearray(tag)
            mutated[rng.randrange(len(mutated))] ^= 1 << rng.randrange(8)
            assert not hmac_verify(key, message, bytes(mutated))


def test_sign_verify() -> None:
    """Test signatures verify only for the signer and the signed message."""
    key = NodeKeyPair.generate()
    signature = sign(key, b"message")
    assert signature_verify(key.public_bytes(), b"message", signature)
    assert not signature_verify(NodeKeyPair.generate().public_bytes(), b"message", signature)
    assert not signature_verify(key.public_bytes(), b"messagf", signature)


def test_signature_malformed() -> None:
    """Test non-DER signature bytes raise MalformedSignature."""
    key = NodeKeyPair.generate()
    with pytest.raises(MalformedSignature):
        signature_verify(key.public_bytes(), b"message", b"\x00" * 16)
    with pytest.raises(MalformedSignature):
        signature_verify(key.public_bytes(), b"message", b"")


def test_cert_issue_verify() -> None:
    """Test an issued certificate verifies and its fields are bound."""
    orchestrator = NodeKeyPair.generate()
    subject = NodeKeyPair.generate()
    cert = cert_issue(orchestrator, subject.public_bytes(), MOCK_NODE_ID)
    assert cert_verify(orchestrator.public_bytes(), cert)
    assert cert_verify(orchestrator.public_bytes(), Certificate.from_bytes(cert.to_bytes()))
    assert not cert_verify(orchestrator.public_bytes(), replace(cert, subject_node_id="node-z"))
    assert not cert_verify(orchestrator.public_bytes(), replace(cert, issued_at=cert.issued_at + 1))
    assert not cert_verify(
        orchestrator.public_bytes(),
        replace(cert, subject_public_key=NodeKeyPair.generate().public_bytes()),
    )


def test_cert_forgery() -> None:
    """Test certificates signed by any other key never verify."""
    orchestrator = NodeKeyPair.generate()
    subject = NodeKeyPair.generate().public_bytes()
    for index in range(1000):
        forged = cert_issue(NodeKeyPair.generate(), subject, f"rogue-{index}")
        assert not cert_verify(orchestrator.public_bytes(), forged)


def test_cert_issue_errors() -> None:
    """Test issuance rejects empty, duplicate and oversized ids and bad keys."""
    orchestrator = NodeKeyPair.generate()
    subject = NodeKeyPair.generate().public_bytes()
    with pytest.raises(MalformedCertificate):
        cert_issue(orchestrator, subject, "")
    with pytest.raises(MalformedCertificate):
        cert_issue(orchestrator, subject, "n" * 65)
    with pytest.raises(DuplicateNodeId):
        cert_issue(orchestrator, subject, MOCK_NODE_ID, issued_ids={MOCK_NODE_ID})
    with pytest.raises(MalformedCertificate):
        cert_issue(orchestrator, b"\x00", MOCK_NODE_ID)


def test_cert_from_bytes_truncated() -> None:
    """Test a truncated certificate raises MalformedCertificate."""
    cert = cert_issue(NodeKeyPair.generate(), NodeKeyPair.generate().public_bytes(), MOCK_NODE_ID)
    with pytest.raises(MalformedCertificate):
        Certificate.from_bytes(cert.to_bytes()[:-1])


def test_nonce_log_unique(tmp_path: Path) -> None:
    """Test issued nonces never repeat and the log persists."""
    path = tmp_path / "nonces.log"
    log = NonceLog(path)
    issued = [log.issue() for _ in range(10_000)]
    assert len({nonce.value for nonce in issued}) == 10_000
    reloaded = NonceLog(path)
    assert len(reloaded) == 10_000
    assert issued[0] in reloaded
    assert issued[-1].value in reloaded


def test_nonce_log_write_failure(tmp_path: Path) -> None:
    """Test a nonce that cannot be logged is refused and not counted as issued."""
    path = tmp_path / "nonces.log"
    log = NonceLog(path)
    path.mkdir()
    with pytest.raises(StorageError):
        log.issue()
    assert len(log) == 0

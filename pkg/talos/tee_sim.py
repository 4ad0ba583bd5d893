"""Mock hardware root of trust.

Provides the primitives the protocol expects from any TEE: measurement,
policy-bound sealing, per-instance monotonic counters and signed
attestation quotes. `TeeBackend` is the boundary the rest of the package
talks to; `MockTeeBackend` implements it in software.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import IntEnum
import hashlib
import os
from pathlib import Path
import threading

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .codec import ByteReader, u8, u32
from .const import (
    AEAD_NONCE_SIZE,
    AEAD_TAG_SIZE,
    COUNTER_ID_SIZE,
    HASH_SIZE,
    LOGGER,
    MAX_SIGNATURE_SIZE,
    PLATFORM_ID_SIZE,
    REPORT_DATA_SIZE,
    ROOT_SECRET_SIZE,
    SERVICE_IDENTITY,
    U64_MAX,
)
from .crypto_channel import (
    NodeKeyPair,
    PublicKeyLike,
    hkdf_sha256,
    random_bytes,
    sign,
    verify_quietly,
)
from .exceptions import (
    CounterOverflow,
    EmptyInput,
    MalformedQuote,
    PolicyMismatch,
    SealFailure,
    StorageError,
    TeeError,
    UnsealAuthFailure,
)

POLICY_HEADER_SIZE = 1 + HASH_SIZE


@dataclass(frozen=True, repr=False)
class PlatformRootSecret:
    """Hardware-bound secret every platform key derives from."""

    secret: bytes
    platform_id: bytes

    @classmethod
    def from_secret(cls, secret: bytes) -> PlatformRootSecret:
        """Wrap raw secret bytes, deriving the platform id."""
        if len(secret) != ROOT_SECRET_SIZE:
            raise TeeError(f"root secret must be {ROOT_SECRET_SIZE} bytes")
        platform_id = hashlib.sha256(b"talos-platform-id" + secret).digest()
        return cls(secret=secret, platform_id=platform_id[:PLATFORM_ID_SIZE])

    @classmethod
    def generate(cls) -> PlatformRootSecret:
        """Draw a fresh root secret."""
        return cls.from_secret(random_bytes(ROOT_SECRET_SIZE))

    @classmethod
    def load_or_create(cls, path: Path) -> PlatformRootSecret:
        """Load the root-secret file, creating it with mode 0600 on first start."""
        if path.exists():
            return cls.from_secret(path.read_bytes())
        root = cls.generate()
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
        with os.fdopen(fd, "wb") as handle:
            handle.write(root.secret)
        LOGGER.info("Provisioned platform %s", root.platform_id.hex())
        return root

    def __repr__(self) -> str:
        """Show the platform id only."""
        return f"PlatformRootSecret(platform_id={self.platform_id.hex()})"


def _check_digest(digest: bytes) -> None:
    if len(digest) != HASH_SIZE:
        raise TeeError(f"measurement must be {HASH_SIZE} bytes, got {len(digest)}")


@dataclass(frozen=True)
class EnclaveMeasurement:
    """Hash identity of an enclave's canonical persistent content."""

    digest: bytes

    def __post_init__(self) -> None:
        """Validate the digest width."""
        _check_digest(self.digest)

    @classmethod
    def from_hex(cls, text: str) -> EnclaveMeasurement:
        """Parse a hex measurement."""
        try:
            return cls(bytes.fromhex(text))
        except ValueError as err:
            raise TeeError(f"invalid measurement hex: {text!r}") from err

    def hex(self) -> str:
        """Return the measurement as hex."""
        return self.digest.hex()

    def __str__(self) -> str:
        """Return a short hex form for logs."""
        return self.digest.hex()[:16]


@dataclass(frozen=True)
class SignerMeasurement:
    """Hash identity of an application vendor's signing key."""

    digest: bytes

    def __post_init__(self) -> None:
        """Validate the digest width."""
        _check_digest(self.digest)

    @classmethod
    def from_public_key(cls, public_key: bytes) -> SignerMeasurement:
        """Derive the signer identity from a vendor public key."""
        return cls(hashlib.sha256(public_key).digest())

    def hex(self) -> str:
        """Return the signer identity as hex."""
        return self.digest.hex()


def measure_enclave(persistent_canonical_bytes: bytes) -> EnclaveMeasurement:
    """Measure canonical persistent content."""
    if not persistent_canonical_bytes:
        raise EmptyInput("cannot measure empty content")
    return EnclaveMeasurement(hashlib.sha256(persistent_canonical_bytes).digest())


SERVICE_MEASUREMENT = measure_enclave(SERVICE_IDENTITY)


class SealPolicyKind(IntEnum):
    """What a sealing key is bound to."""

    BIND_TO_ENCLAVE = 1
    BIND_TO_SIGNER = 2


@dataclass(frozen=True)
class SealPolicy:
    """Sealing policy: kind plus the measurement it binds to."""

    kind: SealPolicyKind
    bound_measurement: bytes

    def __post_init__(self) -> None:
        """Validate the bound measurement width."""
        _check_digest(self.bound_measurement)

    @classmethod
    def for_enclave(cls, measurement: EnclaveMeasurement) -> SealPolicy:
        """Bind to one exact enclave build."""
        return cls(SealPolicyKind.BIND_TO_ENCLAVE, measurement.digest)

    @classmethod
    def for_signer(cls, signer: SignerMeasurement) -> SealPolicy:
        """Bind to every enclave from one vendor."""
        return cls(SealPolicyKind.BIND_TO_SIGNER, signer.digest)

    def to_bytes(self) -> bytes:
        """Serialize as 1 kind byte followed by the measurement."""
        return u8(self.kind) + self.bound_measurement

    @classmethod
    def from_bytes(cls, data: bytes) -> SealPolicy:
        """Parse a policy header."""
        if len(data) != POLICY_HEADER_SIZE:
            raise UnsealAuthFailure("policy header has the wrong size")
        try:
            kind = SealPolicyKind(data[0])
        except ValueError as err:
            raise UnsealAuthFailure(f"unknown policy kind {data[0]}") from err
        return cls(kind, bytes(data[1:]))


def derive_seal_key(root: PlatformRootSecret, policy: SealPolicy) -> bytes:
    """Derive the sealing key for policy on this platform."""
    return hkdf_sha256(root.secret, b"seal" + policy.to_bytes())


@dataclass(frozen=True)
class SealedBlob:
    """AEAD ciphertext bound to its policy header."""

    policy_header: bytes
    nonce: bytes
    ciphertext: bytes
    auth_tag: bytes

    @property
    def policy(self) -> SealPolicy:
        """Return the parsed policy header."""
        return SealPolicy.from_bytes(self.policy_header)

    def to_bytes(self) -> bytes:
        """Serialize header, nonce, length-prefixed ciphertext and tag."""
        return (
            self.policy_header
            + self.nonce
            + u32(len(self.ciphertext))
            + self.ciphertext
            + self.auth_tag
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> SealedBlob:
        """Parse the wire form."""
        reader = ByteReader(data, UnsealAuthFailure)
        header = reader.take(POLICY_HEADER_SIZE)
        nonce = reader.take(AEAD_NONCE_SIZE)
        ciphertext = reader.lp()
        tag = reader.take(AEAD_TAG_SIZE)
        reader.finish()
        return cls(header, nonce, ciphertext, tag)


def seal(root: PlatformRootSecret, policy: SealPolicy, plaintext: bytes) -> SealedBlob:
    """Encrypt plaintext under the key derived for policy."""
    header = policy.to_bytes()
    nonce = random_bytes(AEAD_NONCE_SIZE)
    try:
        sealed = AESGCM(derive_seal_key(root, policy)).encrypt(nonce, plaintext, header)
    except OverflowError as err:
        raise SealFailure(str(err)) from err
    return SealedBlob(
        policy_header=header,
        nonce=nonce,
        ciphertext=sealed[:-AEAD_TAG_SIZE],
        auth_tag=sealed[-AEAD_TAG_SIZE:],
    )


def unseal(
    root: PlatformRootSecret, blob: SealedBlob, policy: SealPolicy | None = None
) -> bytes:
    """Decrypt a sealed blob, optionally requiring a specific policy."""
    header_policy = SealPolicy.from_bytes(blob.policy_header)
    if policy is not None and policy != header_policy:
        raise PolicyMismatch("blob is sealed under a different policy")
    if len(blob.nonce) != AEAD_NONCE_SIZE or len(blob.auth_tag) != AEAD_TAG_SIZE:
        raise UnsealAuthFailure("malformed nonce or tag")
    try:
        return AESGCM(derive_seal_key(root, header_policy)).decrypt(
            blob.nonce, blob.ciphertext + blob.auth_tag, blob.policy_header
        )
    except InvalidTag as err:
        raise UnsealAuthFailure("sealed blob failed authentication") from err


@dataclass(frozen=True)
class MonotonicCounter:
    """Counter value snapshot."""

    counter_id: bytes
    value: int = 0

    def __post_init__(self) -> None:
        """Validate the counter id and range."""
        if len(self.counter_id) != COUNTER_ID_SIZE:
            raise TeeError(f"counter id must be {COUNTER_ID_SIZE} bytes")
        if not 0 <= self.value <= U64_MAX:
            raise TeeError("counter value outside u64 range")


def counter_increment(counter: MonotonicCounter) -> MonotonicCounter:
    """Return the counter advanced by one."""
    if counter.value >= U64_MAX:
        raise CounterOverflow(counter.counter_id.hex())
    return MonotonicCounter(counter.counter_id, counter.value + 1)


def counter_read(counter: MonotonicCounter) -> int:
    """Return the counter value."""
    return counter.value


class CounterBank:
    """Monotonic counters owned by one enclave instance.

    Counters start at zero when the instance launches. Increments on one
    counter id are serialized so concurrent callers observe a strictly
    increasing sequence.
    """

    def __init__(self) -> None:
        """Initialize an empty bank."""
        self._counters: dict[bytes, MonotonicCounter] = {}
        self._locks: dict[bytes, threading.Lock] = {}
        self._lock = threading.Lock()
        self.offsets_applied = False

    @property
    def lock(self) -> threading.Lock:
        """Return the bank-wide lock guarding counter creation."""
        return self._lock

    def _counter_lock(self, counter_id: bytes) -> threading.Lock:
        with self._lock:
            if counter_id not in self._counters:
                self._counters[counter_id] = MonotonicCounter(counter_id)
                self._locks[counter_id] = threading.Lock()
            return self._locks[counter_id]

    def ensure(self, counter_id: bytes) -> None:
        """Create a zero counter if absent."""
        self._counter_lock(counter_id)

    def increment(self, counter_id: bytes) -> int:
        """Atomically increment a counter and return its new value."""
        with self._counter_lock(counter_id):
            counter = counter_increment(self._counters[counter_id])
            self._counters[counter_id] = counter
            return counter.value

    def read(self, counter_id: bytes) -> int | None:
        """Return a counter value, or None if the id is unknown."""
        counter = self._counters.get(counter_id)
        return None if counter is None else counter_read(counter)

    def ids(self) -> list[bytes]:
        """Return counter ids in creation order."""
        with self._lock:
            return list(self._counters)


@dataclass(frozen=True)
class AttestationQuote:
    """Platform-signed report over a measurement and caller data."""

    measurement: EnclaveMeasurement
    report_data: bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        """Return the bytes covered by the signature."""
        return self.measurement.digest + self.report_data

    def to_bytes(self) -> bytes:
        """Serialize as measurement, report data and length-prefixed signature."""
        return self.signed_bytes() + u32(len(self.signature)) + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> AttestationQuote:
        """Parse the wire form."""
        reader = ByteReader(data, MalformedQuote)
        measurement = EnclaveMeasurement(reader.take(HASH_SIZE))
        report_data = reader.take(REPORT_DATA_SIZE)
        signature = reader.lp(max_size=MAX_SIGNATURE_SIZE)
        reader.finish()
        return cls(measurement, report_data, signature)


def quote_generate(
    platform_signing_key: NodeKeyPair,
    measurement: EnclaveMeasurement,
    report_data: bytes,
) -> AttestationQuote:
    """Sign a quote over measurement and report data."""
    if len(report_data) != REPORT_DATA_SIZE:
        raise MalformedQuote(f"report data must be {REPORT_DATA_SIZE} bytes")
    unsigned = measurement.digest + report_data
    return AttestationQuote(measurement, report_data, sign(platform_signing_key, unsigned))


def quote_verify(platform_public_key: PublicKeyLike, quote: AttestationQuote) -> bool:
    """Return whether the quote was signed by the platform key."""
    if len(quote.report_data) != REPORT_DATA_SIZE:
        return False
    return verify_quietly(platform_public_key, quote.signed_bytes(), quote.signature)


class TeeBackend(ABC):
    """Boundary between the migration service and the hardware TEE."""

    @property
    @abstractmethod
    def platform_id(self) -> bytes:
        """Return the platform identifier."""

    @property
    @abstractmethod
    def attestation_public_key(self) -> bytes:
        """Return the platform attestation public key."""

    def measure(self, persistent_canonical_bytes: bytes) -> EnclaveMeasurement:
        """Measure enclave content."""
        return measure_enclave(persistent_canonical_bytes)

    @abstractmethod
    def seal(self, policy: SealPolicy, plaintext: bytes) -> SealedBlob:
        """Seal plaintext under policy."""

    @abstractmethod
    def unseal(self, blob: SealedBlob, policy: SealPolicy | None = None) -> bytes:
        """Unseal a blob produced on this platform."""

    @abstractmethod
    def quote(
        self, measurement: EnclaveMeasurement, report_data: bytes
    ) -> AttestationQuote:
        """Produce an attestation quote."""

    def new_counter_bank(self) -> CounterBank:
        """Return zeroed counters for a freshly launched instance."""
        return CounterBank()


class MockTeeBackend(TeeBackend):
    """Software TEE backed by a root secret and an attestation key."""

    def __init__(self, root: PlatformRootSecret, attestation_key: NodeKeyPair) -> None:
        """Initialize the backend."""
        self._root = root
        self._attestation_key = attestation_key

    @classmethod
    def generate(cls) -> MockTeeBackend:
        """Create an in-memory platform."""
        return cls(PlatformRootSecret.generate(), NodeKeyPair.generate())

    @classmethod
    def load_or_create(cls, root_path: Path, key_path: Path) -> MockTeeBackend:
        """Load platform material from disk, provisioning it on first start."""
        root = PlatformRootSecret.load_or_create(root_path)
        if key_path.exists():
            key = NodeKeyPair.from_pem(key_path.read_bytes())
        else:
            key = NodeKeyPair.generate()
            try:
                fd = os.open(key_path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
                with os.fdopen(fd, "wb") as handle:
                    handle.write(key.to_pem())
            except OSError as err:
                raise StorageError(f"cannot write {key_path}: {err}") from err
        return cls(root, key)

    @property
    def platform_id(self) -> bytes:
        """Return the platform identifier."""
        return self._root.platform_id

    @property
    def attestation_public_key(self) -> bytes:
        """Return the platform attestation public key."""
        return self._attestation_key.public_bytes()

    def seal(self, policy: SealPolicy, plaintext: bytes) -> SealedBlob:
        """Seal plaintext under policy."""
        return seal(self._root, policy, plaintext)

    def unseal(self, blob: SealedBlob, policy: SealPolicy | None = None) -> bytes:
        """Unseal a blob produced on this platform."""
        return unseal(self._root, blob, policy)

    def quote(
        self, measurement: EnclaveMeasurement, report_data: bytes
    ) -> AttestationQuote:
        """Produce an attestation quote."""
        return quote_generate(self._attestation_key, measurement, report_data)

    def __repr__(self) -> str:
        """Describe the backend without key material."""
        return f"MockTeeBackend(platform_id={self.platform_id.hex()})"

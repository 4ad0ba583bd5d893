"""Volatile state of a guest: serialization, sealing, masking and counter offsets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .codec import ByteReader, lp, u32, u64
from .const import AEAD_NONCE_SIZE, COUNTER_ID_SIZE, HASH_SIZE, LOGGER, STATE_MAGIC, U64_MAX
from .crypto_channel import SessionKeys, hmac_compute, hmac_verify, random_bytes
from .exceptions import (
    AppNotPaused,
    CounterBankNotFresh,
    CounterOverflow,
    DecryptFailure,
    MacMismatch,
    MalformedState,
    OffsetsAlreadyApplied,
    SealFailure,
    TalosError,
    UnknownCounterId,
)

if TYPE_CHECKING:
    from .guest_model import GuestInstance
    from .tee_sim import CounterBank, SealedBlob, SealPolicy, TeeBackend

# fd, path length and offset; the path bytes follow the length
_FD_FIXED_SIZE = 4 + 4 + 8
_COUNTER_RECORD_SIZE = COUNTER_ID_SIZE + 8


@dataclass(frozen=True)
class FdEntry:
    """Open descriptor captured with the state."""

    fd: int
    path: str
    offset: int = 0


@dataclass(frozen=True)
class CounterValue:
    """Monotonic counter value captured with the state."""

    counter_id: bytes
    value: int


@dataclass(frozen=True)
class VolatileState:
    """Runtime context of an enclave application."""

    heap_image: bytes = b""
    stack_image: bytes = b""
    fd_table: tuple[FdEntry, ...] = ()
    counters: tuple[CounterValue, ...] = ()
    secrets: bytes = b""

    def __post_init__(self) -> None:
        """Check descriptor numbers and record widths."""
        fds = [entry.fd for entry in self.fd_table]
        if len(set(fds)) != len(fds):
            raise MalformedState("duplicate fd numbers")
        for entry in self.fd_table:
            if not 0 <= entry.fd < 2**32 or not 0 <= entry.offset <= U64_MAX:
                raise MalformedState(f"fd record {entry.fd} out of range")
        for counter in self.counters:
            if len(counter.counter_id) != COUNTER_ID_SIZE:
                raise MalformedState("counter id must be 8 bytes")
            if not 0 <= counter.value <= U64_MAX:
                raise MalformedState("counter value outside u64 range")

    @property
    def is_empty(self) -> bool:
        """Return whether every field is empty."""
        return self == VolatileState()


def volatile_serialize(state: VolatileState) -> bytes:
    """Encode a state in the TVS1 layout.

    The magic is followed by seven u32 length words: heap, stack, the fd
    section with its record count, the counter section with its record
    count, and secrets. An all-empty state is the magic plus 28 zero bytes.
    """
    fd_records = b"".join(
        u32(entry.fd) + lp(entry.path.encode()) + u64(entry.offset)
        for entry in state.fd_table
    )
    counter_records = b"".join(
        counter.counter_id + u64(counter.value) for counter in state.counters
    )
    return b"".join(
        (
            STATE_MAGIC,
            lp(state.heap_image),
            lp(state.stack_image),
            u32(len(fd_records)),
            u32(len(state.fd_table)),
            fd_records,
            u32(len(counter_records)),
            u32(len(state.counters)),
            counter_records,
            lp(state.secrets),
        )
    )


def volatile_deserialize(data: bytes) -> VolatileState:
    """Decode a TVS1 state, rejecting truncation and inconsistent lengths."""
    reader = ByteReader(data, MalformedState)
    if reader.take(len(STATE_MAGIC)) != STATE_MAGIC:
        raise MalformedState("bad state magic")
    heap = reader.lp()
    stack = reader.lp()

    fd_section_len = reader.u32()
    fd_count = reader.u32()
    fd_reader = ByteReader(reader.take(fd_section_len), MalformedState)
    if fd_count * _FD_FIXED_SIZE > fd_reader.remaining:
        raise MalformedState(f"fd count {fd_count} exceeds section")
    fds = []
    for _ in range(fd_count):
        fd = fd_reader.u32()
        path = fd_reader.lp_str()
        fds.append(FdEntry(fd, path, fd_reader.u64()))
    fd_reader.finish()

    ctr_section_len = reader.u32()
    ctr_count = reader.u32()
    if ctr_section_len != ctr_count * _COUNTER_RECORD_SIZE:
        raise MalformedState("counter section length disagrees with its count")
    ctr_reader = ByteReader(reader.take(ctr_section_len), MalformedState)
    counters = tuple(
        CounterValue(ctr_reader.take(COUNTER_ID_SIZE), ctr_reader.u64())
        for _ in range(ctr_count)
    )
    secrets = reader.lp()
    reader.finish()
    return VolatileState(heap, stack, tuple(fds), counters, secrets)


def externalize_state(
    app: GuestInstance, tee: TeeBackend, policy: SealPolicy
) -> SealedBlob:
    """Capture a paused guest's state, live counters included, and seal it."""
    if not app.is_paused:
        raise AppNotPaused(f"{app.program.name} is {app.run_state}")
    plaintext = volatile_serialize(app.snapshot())
    try:
        return tee.seal(policy, plaintext)
    except SealFailure:
        raise
    except TalosError as err:
        raise SealFailure(str(err)) from err


@dataclass(frozen=True)
class MaskedState:
    """Session-encrypted and MACed state in transit."""

    ciphertext: bytes
    mac: bytes
    aead_nonce: bytes

    def to_bytes(self) -> bytes:
        """Serialize as nonce, length-prefixed ciphertext, mac."""
        return self.aead_nonce + lp(self.ciphertext) + self.mac

    @classmethod
    def from_bytes(cls, data: bytes) -> MaskedState:
        """Parse the wire form."""
        reader = ByteReader(data, MalformedState)
        nonce = reader.take(AEAD_NONCE_SIZE)
        ciphertext = reader.lp()
        mac = reader.take(HASH_SIZE)
        reader.finish()
        return cls(ciphertext=ciphertext, mac=mac, aead_nonce=nonce)


def mask_state(plain: bytes, keys: SessionKeys) -> MaskedState:
    """Encrypt then MAC plain under the session keys."""
    nonce = random_bytes(AEAD_NONCE_SIZE)
    ciphertext = AESGCM(keys.enc_key).encrypt(nonce, plain, None)
    return MaskedState(
        ciphertext=ciphertext,
        mac=hmac_compute(keys.mac_key, nonce + ciphertext),
        aead_nonce=nonce,
    )


def unmask_state(masked: MaskedState, keys: SessionKeys) -> bytes:
    """Verify the MAC, then decrypt."""
    if len(masked.aead_nonce) != AEAD_NONCE_SIZE or not hmac_verify(
        keys.mac_key, masked.aead_nonce + masked.ciphertext, masked.mac
    ):
        raise MacMismatch("state MAC does not verify")
    try:
        return AESGCM(keys.enc_key).decrypt(masked.aead_nonce, masked.ciphertext, None)
    except InvalidTag as err:
        raise DecryptFailure("state ciphertext failed authentication") from err


@dataclass(frozen=True)
class CounterOffsetTable:
    """Source counter values to add to freshly zeroed target counters."""

    offsets: tuple[CounterValue, ...] = ()

    def get(self, counter_id: bytes) -> int | None:
        """Return the offset for counter_id, if any."""
        return next(
            (entry.value for entry in self.offsets if entry.counter_id == counter_id),
            None,
        )


def export_counter_offsets(state: VolatileState) -> CounterOffsetTable:
    """Take the counter values of a captured state as offsets."""
    return CounterOffsetTable(tuple(state.counters))


def _effective(counter_id: bytes, local: int, offset: int) -> int:
    value = local + offset
    if value > U64_MAX:
        raise CounterOverflow(f"counter {counter_id.hex()} would pass 2**64-1")
    return value


@dataclass
class EffectiveCounters:
    """Counter view of a restored instance: local value plus migrated offset.

    Counters in the target start at zero; the offset carries the value they
    reached on the source, so reads never go backwards across a migration.
    """

    bank: CounterBank
    table: CounterOffsetTable = field(default_factory=CounterOffsetTable)

    def read(self, counter_id: bytes) -> int:
        """Return the effective value of counter_id."""
        local = self.bank.read(counter_id)
        offset = self.table.get(counter_id)
        if local is None and offset is None:
            raise UnknownCounterId(counter_id.hex())
        return _effective(counter_id, local or 0, offset or 0)

    def increment(self, counter_id: bytes) -> int:
        """Increment counter_id, creating it if new, and return the effective value."""
        offset = self.table.get(counter_id) or 0
        _effective(counter_id, (self.bank.read(counter_id) or 0) + 1, offset)
        return _effective(counter_id, self.bank.increment(counter_id), offset)

    def ids(self) -> list[bytes]:
        """Return migrated ids first, then ids created locally."""
        ordered = [entry.counter_id for entry in self.table.offsets]
        ordered.extend(cid for cid in self.bank.ids() if cid not in ordered)
        return ordered

    def values(self) -> tuple[CounterValue, ...]:
        """Return every effective counter in id order."""
        return tuple(CounterValue(cid, self.read(cid)) for cid in self.ids())


def apply_counter_offsets(bank: CounterBank, table: CounterOffsetTable) -> EffectiveCounters:
    """Bind an offset table to a freshly launched counter bank, exactly once."""
    moved = [cid.hex() for cid in bank.ids() if bank.read(cid)]
    if moved:
        raise CounterBankNotFresh(f"counters already advanced: {', '.join(moved)}")
    with bank.lock:
        if bank.offsets_applied:
            raise OffsetsAlreadyApplied("counter offsets were already applied")
        bank.offsets_applied = True
    for entry in table.offsets:
        bank.ensure(entry.counter_id)
    LOGGER.debug("Applied %d counter offsets", len(table.offsets))
    return EffectiveCounters(bank, table)

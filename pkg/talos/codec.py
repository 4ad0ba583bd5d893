"""Little-endian binary encoding helpers shared by the wire formats."""

from __future__ import annotations

import struct

from .exceptions import TalosError

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")


def u8(value: int) -> bytes:
    """Encode an unsigned byte."""
    return _U8.pack(value)


def u16(value: int) -> bytes:
    """Encode an unsigned 16-bit integer."""
    return _U16.pack(value)


def u32(value: int) -> bytes:
    """Encode an unsigned 32-bit integer."""
    return _U32.pack(value)


def u64(value: int) -> bytes:
    """Encode an unsigned 64-bit integer."""
    return _U64.pack(value)


def lp(data: bytes) -> bytes:
    """Prefix data with its u32 length."""
    return _U32.pack(len(data)) + data


def lp_str(text: str) -> bytes:
    """Length-prefix the UTF-8 encoding of text."""
    return lp(text.encode())


class ByteReader:
    """Bounds-checked cursor over a byte sequence.

    Every read validates the declared size against the remaining input
    before slicing, so hostile length fields cannot force large
    allocations. Failures raise the error class given at construction.
    """

    def __init__(self, data: bytes, error: type[TalosError]) -> None:
        """Initialize the reader."""
        self._data = memoryview(data)
        self._pos = 0
        self._error = error

    @property
    def remaining(self) -> int:
        """Return the number of unread bytes."""
        return len(self._data) - self._pos

    def take(self, size: int) -> bytes:
        """Read exactly size bytes."""
        if size < 0 or size > self.remaining:
            raise self._error(
                f"need {size} bytes at offset {self._pos}, have {self.remaining}"
            )
        chunk = bytes(self._data[self._pos : self._pos + size])
        self._pos += size
        return chunk

    def u8(self) -> int:
        """Read an unsigned byte."""
        return _U8.unpack(self.take(1))[0]

    def u16(self) -> int:
        """Read an unsigned 16-bit integer."""
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        """Read an unsigned 32-bit integer."""
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        """Read an unsigned 64-bit integer."""
        return _U64.unpack(self.take(8))[0]

    def i64(self) -> int:
        """Read a signed 64-bit integer."""
        return _I64.unpack(self.take(8))[0]

    def lp(self, max_size: int | None = None) -> bytes:
        """Read a u32-length-prefixed field."""
        size = self.u32()
        if max_size is not None and size > max_size:
            raise self._error(f"field of {size} bytes exceeds limit {max_size}")
        return self.take(size)

    def lp_str(self, max_size: int | None = None) -> str:
        """Read a length-prefixed UTF-8 string."""
        raw = self.lp(max_size)
        try:
            return raw.decode()
        except UnicodeDecodeError as err:
            raise self._error(f"invalid UTF-8 text: {err}") from err

    def finish(self) -> None:
        """Require that all input was consumed."""
        if self.remaining:
            raise self._error(f"{self.remaining} trailing bytes")

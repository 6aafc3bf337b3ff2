"""Little-endian binary container helpers shared by the model and dataset files."""
from __future__ import annotations

import struct


class FormatError(ValueError):
    """Base class for malformed model/dataset files."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class RangeError(FormatError):
    """A stored value violates the file's declared invariants."""


class Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = memoryview(buf)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"truncated {self.what}: wanted {n} bytes at offset {self.pos}, "
                                 f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def u64(self) -> int:
        return self.unpack("<Q")[0]

    def expect_header(self, magic: bytes, version: int) -> None:
        got = bytes(self.take(len(magic)))
        if got != magic:
            raise BadMagicError(f"bad magic {got!r} in {self.what}, expected {magic!r}")
        v = self.u32()
        if v != version:
            raise VersionError(f"unsupported {self.what} version {v}")

    def at_end(self) -> bool:
        return self.pos == len(self.buf)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h

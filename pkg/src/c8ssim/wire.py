"""Canonical binary layout for every signed or transported structure.

Fixed field order, ``u32`` big-endian length prefixes on byte and text
strings, ``u64`` big-endian integers. Two encoders given equal values
always produce equal bytes, which is what makes replica issuance
idempotent.
"""

from __future__ import annotations

import struct


class Malformed(ValueError):
    def __init__(self, offset: int, reason: str = "truncated"):
        super().__init__(f"malformed input at byte {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">B", value))
        return self

    def u16(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">H", value))
        return self

    def u32(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">I", value))
        return self

    def u64(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">Q", value))
        return self

    def raw(self, data: bytes) -> "Writer":
        self._parts.append(bytes(data))
        return self

    def blob(self, data: bytes) -> "Writer":
        return self.u32(len(data)).raw(data)

    def text(self, value: str) -> "Writer":
        return self.blob(value.encode("utf-8"))

    def flag(self, present: bool) -> "Writer":
        return self.u8(1 if present else 0)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, offset: int = 0) -> None:
        self.data = bytes(data)
        self.offset = offset

    def _take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise Malformed(self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def blob(self) -> bytes:
        start = self.offset
        n = self.u32()
        if self.offset + n > len(self.data):
            raise Malformed(start, f"declared length {n} exceeds input")
        return self._take(n)

    def text(self) -> str:
        start = self.offset
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise Malformed(start, "invalid utf-8") from exc

    def flag(self) -> bool:
        start = self.offset
        value = self.u8()
        if value > 1:
            raise Malformed(start, "invalid flag")
        return bool(value)

    def done(self) -> None:
        if self.offset != len(self.data):
            raise Malformed(self.offset, "trailing bytes")

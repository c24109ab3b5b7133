"""Primitive writer/reader for the canonical binary encoding.

Integers are fixed-width big-endian, variable-size fields are u32
length-prefixed, maps are sorted by the encoded key bytes and optionals
carry a presence byte. See docs/encoding.md for the per-type layouts.
"""

from __future__ import annotations

import struct


class EncodingError(ValueError):
    """Raised for invariant-violating values and malformed byte strings."""


# type tags (first byte of every top-level encoding)
TAG_BSM = 0x01
TAG_EDR = 0x02
TAG_DIAGNOSIS = 0x03
TAG_MAINTENANCE = 0x04
TAG_SAMPLE = 0x05
TAG_MAINTENANCE_TBS = 0x14
TAG_SIGNED_RECORD = 0x10
TAG_SIGNED_RECORD_TBS = 0x11
TAG_CERT = 0x20
TAG_CERT_TBS = 0x21
TAG_TX = 0x30
TAG_TX_TBS = 0x31
TAG_BLOCK = 0x40
TAG_BLOCK_TBS = 0x41
TAG_PRE_PREPARE = 0x50
TAG_PREPARE = 0x51
TAG_COMMIT = 0x52
TAG_NEW_ROUND = 0x53
TAG_TX_SUBMIT = 0x54
TAG_COMMITTED_BLOCK = 0x55
TAG_SYNC_REQUEST = 0x56
TAG_VOTE_TBS = 0x5A

_FORMATS = {
    "u8": struct.Struct(">B"),
    "u16": struct.Struct(">H"),
    "u32": struct.Struct(">I"),
    "i32": struct.Struct(">i"),
    "u64": struct.Struct(">Q"),
    "i64": struct.Struct(">q"),
}


class Writer:
    def __init__(self, tag: int | None = None):
        self._parts: list[bytes] = []
        if tag is not None:
            self.u8(tag)

    def _int(self, fmt: str, value: int) -> Writer:
        if isinstance(value, bool) or not isinstance(value, int):
            raise EncodingError(f"{fmt} field must be an int, got {value!r}")
        try:
            self._parts.append(_FORMATS[fmt].pack(value))
        except struct.error as exc:
            raise EncodingError(f"{value} out of range for {fmt}") from exc
        return self

    def u8(self, v: int) -> Writer:
        return self._int("u8", v)

    def u16(self, v: int) -> Writer:
        return self._int("u16", v)

    def u32(self, v: int) -> Writer:
        return self._int("u32", v)

    def i32(self, v: int) -> Writer:
        return self._int("i32", v)

    def u64(self, v: int) -> Writer:
        return self._int("u64", v)

    def i64(self, v: int) -> Writer:
        return self._int("i64", v)

    def boolean(self, v: bool) -> Writer:
        if not isinstance(v, bool):
            raise EncodingError(f"flag must be bool, got {v!r}")
        return self.u8(1 if v else 0)

    def fixed(self, data: bytes, size: int) -> Writer:
        if not isinstance(data, (bytes, bytearray)) or len(data) != size:
            raise EncodingError(f"expected {size} raw bytes")
        self._parts.append(bytes(data))
        return self

    def blob(self, data: bytes) -> Writer:
        if not isinstance(data, (bytes, bytearray)):
            raise EncodingError("expected bytes")
        self.u32(len(data))
        self._parts.append(bytes(data))
        return self

    def text(self, s: str) -> Writer:
        if not isinstance(s, str):
            raise EncodingError(f"expected str, got {s!r}")
        return self.blob(s.encode("utf-8"))

    def raw(self, data: bytes) -> Writer:
        self._parts.append(data)
        return self

    def seq(self, items, write_item) -> Writer:
        items = list(items)
        self.u32(len(items))
        for item in items:
            write_item(self, item)
        return self

    def mapping(self, m: dict, write_key, write_value) -> Writer:
        encoded = []
        for k, v in m.items():
            kw = Writer()
            write_key(kw, k)
            encoded.append((kw.getvalue(), v))
        encoded.sort(key=lambda kv: kv[0])
        for i in range(1, len(encoded)):
            if encoded[i][0] == encoded[i - 1][0]:
                raise EncodingError("duplicate map key")
        self.u32(len(encoded))
        for kb, v in encoded:
            self._parts.append(kb)
            write_value(self, v)
        return self

    def optional(self, value, write_value) -> Writer:
        if value is None:
            return self.u8(0)
        self.u8(1)
        write_value(self, value)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes):
        self._data = memoryview(bytes(data))
        self._pos = 0

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def _take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise EncodingError(f"truncated input at offset {self._pos}")
        out = self._data[self._pos:self._pos + n].tobytes()
        self._pos += n
        return out

    def _int(self, fmt: str) -> int:
        s = _FORMATS[fmt]
        return s.unpack(self._take(s.size))[0]

    def u8(self) -> int:
        return self._int("u8")

    def u16(self) -> int:
        return self._int("u16")

    def u32(self) -> int:
        return self._int("u32")

    def i32(self) -> int:
        return self._int("i32")

    def u64(self) -> int:
        return self._int("u64")

    def i64(self) -> int:
        return self._int("i64")

    def boolean(self) -> bool:
        b = self.u8()
        if b not in (0, 1):
            raise EncodingError(f"invalid flag byte {b}")
        return b == 1

    def expect_tag(self, tag: int) -> None:
        got = self.u8()
        if got != tag:
            raise EncodingError(f"expected tag 0x{tag:02x}, got 0x{got:02x}")

    def peek_tag(self) -> int:
        if self.remaining < 1:
            raise EncodingError("truncated input")
        return self._data[self._pos]

    def fixed(self, size: int) -> bytes:
        return self._take(size)

    def blob(self) -> bytes:
        return self._take(self.u32())

    def text(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingError("invalid utf-8 text") from exc

    def seq(self, read_item) -> list:
        n = self.u32()
        if n > self.remaining:
            raise EncodingError("list length exceeds input")
        return [read_item(self) for _ in range(n)]

    def mapping(self, read_key, read_value, write_key) -> dict:
        n = self.u32()
        if n > self.remaining:
            raise EncodingError("map length exceeds input")
        out = {}
        prev = None
        for _ in range(n):
            k = read_key(self)
            kw = Writer()
            write_key(kw, k)
            kb = kw.getvalue()
            if prev is not None and kb <= prev:
                raise EncodingError("map keys not strictly sorted")
            prev = kb
            out[k] = read_value(self)
        return out

    def optional(self, read_value):
        flag = self.u8()
        if flag == 0:
            return None
        if flag != 1:
            raise EncodingError(f"invalid presence byte {flag}")
        return read_value(self)

    def finish(self) -> None:
        if self.remaining:
            raise EncodingError(f"{self.remaining} trailing bytes")

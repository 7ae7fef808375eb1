"""Little-endian primitives shared by the checkpoint and index containers."""

from __future__ import annotations

import struct

import numpy as np


class FormatError(ValueError):
    """A checkpoint or index file is malformed, truncated or of the wrong version."""


class Writer:
    def __init__(self):
        self.parts = []

    def raw(self, b: bytes):
        self.parts.append(b)

    def u32(self, v: int):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v: int):
        self.parts.append(struct.pack("<Q", v))

    def f64(self, v: float):
        self.parts.append(struct.pack("<d", v))

    def text(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.parts.append(b)

    def array(self, a: np.ndarray, dtype: str):
        self.parts.append(np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def raw(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.raw(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.raw(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.raw(8))[0]

    def text(self) -> str:
        n = self.u32()
        try:
            return self.raw(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 at offset {self.pos - n}") from exc

    def array(self, count: int, dtype: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.raw(count * dt.itemsize), dtype=dt).astype(np.dtype(dtype))

    def at_end(self) -> bool:
        return self.pos == len(self.buf)

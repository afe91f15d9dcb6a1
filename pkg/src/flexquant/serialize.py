"""Little-endian length-prefixed binary framing with a CRC32 trailer.

Shared by the deployment bundle and checkpoint formats. Writers accumulate
bytes and finish with a CRC over everything written; readers verify the
CRC before yielding any field.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np


class CorruptFileError(ValueError):
    """Checksum mismatch or malformed framing."""


class ByteWriter:
    def __init__(self):
        self._chunks: list[bytes] = []
        self.size = 0

    def _push(self, raw: bytes) -> None:
        self._chunks.append(raw)
        self.size += len(raw)

    def u8(self, v: int) -> None:
        self._push(struct.pack("<B", v))

    def u32(self, v: int) -> None:
        self._push(struct.pack("<I", v))

    def f64(self, v: float) -> None:
        self._push(struct.pack("<d", v))

    def raw(self, b: bytes) -> None:
        self._push(b)

    def blob(self, b: bytes) -> None:
        self.u32(len(b))
        self._push(b)

    def text(self, s: str) -> None:
        self.blob(s.encode("utf-8"))

    def f64_array(self, arr: np.ndarray) -> None:
        # asarray keeps 0-d arrays 0-d; ascontiguousarray would promote them
        arr = np.asarray(arr, dtype="<f8", order="C")
        self.u8(arr.ndim)
        for d in arr.shape:
            self.u32(d)
        self._push(arr.tobytes())

    def finish(self) -> bytes:
        body = b"".join(self._chunks)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class ByteReader:
    def __init__(self, buf: bytes, check_crc: bool = True):
        if check_crc:
            if len(buf) < 4:
                raise CorruptFileError("file shorter than its checksum")
            body, trailer = buf[:-4], buf[-4:]
            expect = struct.unpack("<I", trailer)[0]
            got = zlib.crc32(body) & 0xFFFFFFFF
            if got != expect:
                raise CorruptFileError(f"CRC mismatch: computed {got:#010x}, stored {expect:#010x}")
            buf = body
        self.buf = buf
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptFileError(f"truncated at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def blob(self) -> bytes:
        return self._take(self.u32())

    def text(self) -> str:
        return self.blob().decode("utf-8")

    def f64_array(self) -> np.ndarray:
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = self._take(8 * count)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise CorruptFileError(f"{len(self.buf) - self.pos} unread bytes after last field")


def atomic_write_bytes(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def read_file(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()

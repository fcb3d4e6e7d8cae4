"""Small binary-file helpers shared by the persistence code.

All multi-byte fields are little-endian. Writes are atomic: the payload goes to a
temporary file in the destination directory which is then renamed over the target,
so a crash never leaves a half-written artifact behind.
"""

from __future__ import annotations

import os
import struct
import tempfile


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write data to path via a temp file + rename in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_magic(buf: bytes, expected: bytes, path: str) -> None:
    """Check the 8-byte magic at the start of buf."""
    if len(buf) < 8 or buf[:8] != expected:
        raise ValueError(f"{path}: bad magic, expected {expected!r}")


def pack_u8(value: int) -> bytes:
    return struct.pack("<B", value)


def pack_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def pack_u64(value: int) -> bytes:
    return struct.pack("<Q", value)


class Reader:
    """Cursor over a bytes buffer with little-endian scalar reads."""

    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.off = offset

    def u8(self) -> int:
        (v,) = struct.unpack_from("<B", self.buf, self.off)
        self.off += 1
        return v

    def u32(self) -> int:
        (v,) = struct.unpack_from("<I", self.buf, self.off)
        self.off += 4
        return v

    def u64(self) -> int:
        (v,) = struct.unpack_from("<Q", self.buf, self.off)
        self.off += 8
        return v

    def raw(self, n: int) -> bytes:
        chunk = self.buf[self.off : self.off + n]
        if len(chunk) != n:
            raise ValueError("truncated file")
        self.off += n
        return chunk

"""Low-level binary serialization helpers.

All multi-byte integers and floats are little-endian. Structured text
metadata is stored as a length-prefixed block of UTF-8 "key=value" lines.
"""

import os
import struct
import tempfile

from .errors import FormatError


class ByteReader:
    """Sequential reader that reports the byte offset of any failure."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def expect_magic(self, magic: bytes):
        got = self.take(len(magic), "magic")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)

    def done(self):
        if self.offset != len(self.data):
            raise FormatError(
                f"{len(self.data) - self.offset} trailing bytes", self.offset
            )


def pack_u32(*values: int) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def encode_kv_block(items: dict[str, str]) -> bytes:
    """Length-prefixed UTF-8 key=value lines, keys sorted for determinism."""
    lines = []
    for key in sorted(items):
        value = str(items[key])
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"illegal key/value for kv block: {key!r}")
        lines.append(f"{key}={value}")
    payload = ("\n".join(lines)).encode("utf-8")
    return pack_u32(len(payload)) + payload


def decode_kv_block(reader: ByteReader) -> dict[str, str]:
    length = reader.u32("kv block length")
    start = reader.offset
    payload = reader.take(length, "kv block payload")
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("kv block is not valid UTF-8", start) from exc
    items: dict[str, str] = {}
    if not text:
        return items
    for line in text.split("\n"):
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"kv line without '=': {line!r}", start)
        items[key] = value
    return items


def write_bytes_atomic(path: str, data: bytes):
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

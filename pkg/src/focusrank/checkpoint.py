"""Binary parameter checkpoints.

Layout (all integers little-endian):

    magic  b"FRCP" | version u32 | count u32 | crc32 u32 (of the 12 bytes before it)
    then `count` records:
    name_len u32 | name utf-8 | ndim u32 | dims u32 * ndim | data f64-le

Round-trips are bit-exact. Loading validates the magic, version, header
checksum and that the file ends exactly where the last record says it does.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError
from .ops import ParameterSet

MAGIC = b"FRCP"
VERSION = 1


def save_parameters(params: ParameterSet | dict[str, np.ndarray], path) -> None:
    arrays = params.state() if isinstance(params, ParameterSet) else dict(params)
    chunks = []
    header = MAGIC + struct.pack("<II", VERSION, len(arrays))
    chunks.append(header + struct.pack("<I", zlib.crc32(header)))
    for name, value in arrays.items():
        value = np.asarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("truncated file", offset=self.pos)
        piece = self.blob[self.pos : self.pos + n]
        self.pos += n
        return piece

    def u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]


def load_parameters(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.read(4) != MAGIC:
        raise FormatError("bad magic; not a parameter checkpoint", offset=0)
    version = r.u32()
    count = r.u32()
    crc = r.u32()
    if zlib.crc32(blob[:12]) != crc:
        raise FormatError("header checksum mismatch", offset=12)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_at = r.pos
        name = r.read(r.u32()).decode("utf-8")
        if name in arrays:
            raise FormatError(f"duplicate parameter {name!r}", offset=name_at)
        ndim = r.u32()
        if ndim > 8:
            raise FormatError(f"implausible ndim {ndim}", offset=r.pos - 4)
        shape = tuple(r.u32() for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r.read(8 * size)
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if r.pos != len(blob):
        raise FormatError("trailing bytes after last record", offset=r.pos)
    return arrays

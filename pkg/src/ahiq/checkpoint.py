"""Portable AHIQW1 binary checkpoint format.

Layout: magic ``AHIQW1`` (6 bytes), u8 version=1, u32-LE tensor count, then
per tensor: u32 name length, UTF-8 name, u8 dtype tag (0=f32, 1=f64),
u32 rank, rank x u64 dims, raw little-endian data.  A trailing u32 CRC32 of
all preceding bytes closes the file.  Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
import zlib
from typing import Mapping

import numpy as np

MAGIC = b"AHIQW1"
VERSION = 1
_DTYPE_TO_TAG = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointFormatError(ValueError):
    """Malformed checkpoint file; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def serialize(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(tensors))]
    seen: set[str] = set()
    for name, arr in tensors.items():
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        a = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
        if a.dtype.newbyteorder("<") not in _DTYPE_TO_TAG:
            raise ValueError(f"tensor {name!r} has unsupported dtype {a.dtype}")
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", _DTYPE_TO_TAG[a.dtype]))
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(tensors: Mapping[str, np.ndarray], path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(tensors))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError(f"truncated while reading {what}", self.pos)
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def deserialize(blob: bytes) -> dict[str, np.ndarray]:
    rd = _Reader(blob)
    if rd.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    version = rd.u8("version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 6)
    count = rd.u32("tensor count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = rd.u32("name length")
        name_off = rd.pos
        try:
            name = rd.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("tensor name is not valid UTF-8", name_off) from None
        if name in out:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}", name_off)
        tag_off = rd.pos
        tag = rd.u8("dtype tag")
        if tag not in _TAG_TO_DTYPE:
            raise CheckpointFormatError(f"unknown dtype tag {tag}", tag_off)
        dtype = _TAG_TO_DTYPE[tag]
        rank = rd.u32("rank")
        dims = struct.unpack(f"<{rank}Q", rd.take(8 * rank, "dims")) if rank else ()
        n_elem = 1
        for d in dims:
            n_elem *= d
        raw = rd.take(n_elem * dtype.itemsize, f"data of {name!r}")
        out[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    crc_off = rd.pos
    stored = rd.u32("crc32")
    if rd.pos != len(blob):
        raise CheckpointFormatError("trailing bytes after checksum", rd.pos)
    actual = zlib.crc32(blob[:crc_off])
    if stored != actual:
        raise CheckpointFormatError(
            f"checksum mismatch: stored {stored:#010x}, computed {actual:#010x}", crc_off
        )
    return out


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return deserialize(fh.read())

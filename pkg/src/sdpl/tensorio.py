"""Versioned little-endian tensor frames.

Layout: ``b"SDPT"``, u32 version (=1), u8 rank, rank × u32 extents, then
``prod(extents)`` float32 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, VersionMismatch
from .tensor import Tensor

MAGIC = b"SDPT"
VERSION = 1
_HEAD = struct.Struct("<4sIB")


def encode(arr) -> bytes:
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise ValueError("rank too large")
    head = _HEAD.pack(MAGIC, VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return head + dims + body


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one frame at ``offset``; returns (float32 array, next offset)."""
    if len(buf) - offset < _HEAD.size:
        raise CorruptCheckpoint("truncated tensor header")
    magic, version, rank = _HEAD.unpack_from(buf, offset)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"bad tensor magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"tensor frame version {version}, expected {VERSION}")
    offset += _HEAD.size
    if len(buf) - offset < 4 * rank:
        raise CorruptCheckpoint("truncated tensor extents")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    nbytes = 4 * int(np.prod(shape, dtype=np.int64))
    if len(buf) - offset < nbytes:
        raise CorruptCheckpoint("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
    return arr.astype(np.float32), offset + nbytes


def save(path, arr) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf)
    if end != len(buf):
        raise CorruptCheckpoint("trailing bytes after tensor frame")
    return arr


def save_stack(path, arrays) -> None:
    """Concatenate several frames into one file."""
    Path(path).write_bytes(b"".join(encode(a) for a in arrays))


def load_stack(path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    out, off = [], 0
    while off < len(buf):
        arr, off = decode(buf, off)
        out.append(arr)
    return out

"""Versioned binary file of named float32 tensors.

Layout (little-endian)::

    magic  b"VNPT"
    u32    version (1)
    u32    tensor count
    per tensor:
        u16    name length, then UTF-8 name
        u8     ndim, then ndim x u32 dims
        f32    data, C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VNPT"
VERSION = 1


class TensorFileError(ValueError):
    pass


def save_tensors(tensors: dict, path) -> Path:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not np.all(np.isfinite(arr)):
            raise TensorFileError(f"tensor {name!r} has non-finite values")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a tensor file; values come back as float64 arrays."""
    blob = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise TensorFileError(f"truncated tensor file while reading {what}")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise TensorFileError("not a tensor file (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise TensorFileError(f"unsupported tensor file version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        name = take(n, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"{name} ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * size, f"{name} data"), dtype="<f4").astype(np.float64)
        tensors[name] = data.reshape(dims)
    if pos != len(blob):
        raise TensorFileError(f"{len(blob) - pos} trailing bytes after last tensor")
    return tensors

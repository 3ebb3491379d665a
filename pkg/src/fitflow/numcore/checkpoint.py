"""Binary checkpoint format for named float64 tensors.

Layout (little-endian)::

    magic b"FFCKPT\\0\\0" | u32 version | u32 count
    per tensor: u32 name_len | name (utf-8) | u32 rank | u32 dims[rank] | f64 payload
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import FormatError

MAGIC = b"FFCKPT\x00\x00"
VERSION = 1


def dumps_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint at byte offset {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(blob):
        raise FormatError(f"trailing bytes after checkpoint payload at offset {pos}")
    return out


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> bytes:
    blob = dumps_checkpoint(tensors)
    Path(path).write_bytes(blob)
    return blob


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return loads_checkpoint(Path(path).read_bytes())

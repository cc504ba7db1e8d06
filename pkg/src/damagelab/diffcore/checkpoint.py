"""Versioned binary parameter files.

Byte layout (all integers little-endian)::

    magic      8 bytes   b"DLCKPT\\x00\\x00"
    version    uint32    currently 1
    count      uint32    number of records
    record * count:
        name_len  uint16
        name      name_len bytes, UTF-8
        ndim      uint8
        dims      ndim * uint32
        payload   prod(dims) * float32, row-major

Records keep the order they were written in. The same layout carries model
parameters, prototype sets and precomputed token files.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DLCKPT\x00\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(records: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, value in records.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"record {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointError(f"{source}: truncated header")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(blob):
                raise CheckpointError(f"{source}: record {name!r} is truncated")
            out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
            pos += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"{source}: truncated header ({exc})") from None
    if pos != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - pos} trailing bytes")
    return out


def save(path: str | os.PathLike, records: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(records))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    return loads(path.read_bytes(), str(path))

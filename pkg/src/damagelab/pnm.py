"""Binary PGM (P5) reading and writing, 8- and 16-bit."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class PnmError(ValueError):
    pass


def write_pgm(path: str | os.PathLike, array: np.ndarray, maxval: int) -> None:
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise PnmError(f"{path}: PGM needs a 2-D array, got {arr.shape}")
    if not 0 < maxval < 65536:
        raise PnmError(f"{path}: maxval {maxval} out of range")
    if arr.size and (arr.min() < 0 or arr.max() > maxval):
        raise PnmError(f"{path}: values outside [0, {maxval}]")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    Path(path).write_bytes(header + arr.astype(dtype).tobytes())


def _tokens(blob: bytes, count: int, path) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers (comments allowed)."""
    vals, pos = [], 2
    while len(vals) < count:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PnmError(f"{path}: malformed PGM header")
        vals.append(int(blob[start:pos]))
    return vals, pos + 1  # exactly one whitespace byte before the raster


def read_pgm(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:2] != b"P5":
        raise PnmError(f"{path}: not a binary PGM")
    (w, h, maxval), pos = _tokens(blob, 3, path)
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    raster = blob[pos : pos + n]
    if len(raster) != n:
        raise PnmError(f"{path}: raster has {len(raster)} bytes, expected {n}")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.int64), maxval

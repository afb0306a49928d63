"""VSTF binary tensor interchange format.

Layout (all little-endian): magic bytes ``VSTF``, u32 version, u8 rank,
rank x u64 extents, then the payload.  Version 1 carries float32 payloads;
version 2 carries float64 payloads (used by checkpoints, where reload must
be lossless).
"""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"VSTF"
_DTYPES = {1: "<f4", 2: "<f8"}


def write_tensor(fp, arr: np.ndarray, version: int = 1) -> None:
    """Write one tensor to a binary file object."""
    if version not in _DTYPES:
        raise ValueError(f"unsupported VSTF version {version}")
    arr = np.ascontiguousarray(arr)
    if arr.ndim < 1 or arr.ndim > 255:
        raise ValueError(f"rank {arr.ndim} out of range")
    fp.write(MAGIC)
    fp.write(struct.pack("<IB", version, arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fp.write(arr.astype(_DTYPES[version]).tobytes())


def read_tensor(fp) -> np.ndarray:
    """Read one tensor from a binary file object."""
    magic = fp.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<IB", fp.read(5))
    if version not in _DTYPES:
        raise ValueError(f"unsupported VSTF version {version}")
    shape = struct.unpack(f"<{rank}Q", fp.read(8 * rank))
    count = int(np.prod(shape)) if rank else 1
    itemsize = np.dtype(_DTYPES[version]).itemsize
    raw = fp.read(count * itemsize)
    if len(raw) != count * itemsize:
        raise ValueError("truncated VSTF payload")
    return np.frombuffer(raw, dtype=_DTYPES[version]).reshape(shape).astype(np.float64)


def save(path, arr: np.ndarray, version: int = 1) -> None:
    with open(path, "wb") as fp:
        write_tensor(fp, arr, version=version)


def load(path) -> np.ndarray:
    with open(path, "rb") as fp:
        return read_tensor(fp)


def dumps(arr: np.ndarray, version: int = 1) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr, version=version)
    return buf.getvalue()

"""VTSR raw tensor file format.

Layout: magic b"VTSR", u8 dtype code (1=f32, 2=f64), u8 rank,
little-endian u64 extents, then the row-major payload (little-endian).
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"VTSR"
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class VtsrError(ValueError):
    pass


def write_vtsr(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODE_FOR:
        arr = arr.astype(np.float64)
    code = _CODE_FOR[arr.dtype]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB", code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_vtsr(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise VtsrError(f"bad magic {magic!r}, expected {MAGIC!r}")
        code, rank = struct.unpack("<BB", f.read(2))
        if code not in _DTYPE_CODES:
            raise VtsrError(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
        dtype = _DTYPE_CODES[code]
        n = int(np.prod(shape)) if rank else 1
        payload = f.read(n * dtype.itemsize)
        if len(payload) != n * dtype.itemsize:
            raise VtsrError("truncated payload")
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))

"""Reader and writer for the MFT1 binary tensor format.

Layout (all little-endian)::

    b"MFT1" | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u32 extents | values
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"MFT1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class MFTFormatError(ValueError):
    pass


def encode(array, dtype=None) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    target = np.dtype(dtype) if dtype is not None else arr.dtype
    if target not in _DTYPE_TO_CODE:
        target = np.dtype(np.float64)
    if arr.ndim > 255:
        raise MFTFormatError(f"rank {arr.ndim} exceeds the u8 rank field")
    header = MAGIC + struct.pack("<BB", _DTYPE_TO_CODE[target], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = np.ascontiguousarray(arr, dtype=_CODES[_DTYPE_TO_CODE[target]]).tobytes()
    return header + body


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise MFTFormatError("bad magic: not an MFT1 tensor")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise MFTFormatError(f"unknown dtype code {code}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise MFTFormatError(f"truncated header for rank {rank}")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    dt = _CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != expected:
        raise MFTFormatError(
            f"payload size {len(buf) - off} does not match shape {shape} ({expected} bytes)"
        )
    arr = np.frombuffer(buf, dtype=dt, offset=off).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True)


def save(path: str | os.PathLike, array, dtype=None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array, dtype))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())

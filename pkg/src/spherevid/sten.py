"""STEN: little-endian binary tensor files.

Layout::

    b"STEN" | version 0x01 | dtype 0x01 (float32) | rank (u8)
    | rank x u32 extents | row-major float32 payload
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"STEN"
VERSION = 1
DTYPE_F32 = 1


def encode(array) -> bytes:
    arr = array.numpy() if isinstance(array, Tensor) else np.asarray(array)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = MAGIC + bytes([VERSION, DTYPE_F32, arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise FormatError("missing STEN magic")
    version, dtype, rank = buf[4], buf[5], buf[6]
    if version != VERSION:
        raise FormatError(f"unsupported STEN version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported STEN dtype code {dtype}")
    if rank == 0:
        raise FormatError("rank must be >= 1")
    head = 7 + 4 * rank
    if len(buf) < head:
        raise FormatError("truncated STEN header")
    dims = struct.unpack(f"<{rank}I", buf[7:head])
    if any(d == 0 for d in dims):
        raise FormatError(f"zero extent in {dims}")
    count = int(np.prod(dims))
    if len(buf) != head + 4 * count:
        raise FormatError(f"payload is {len(buf) - head} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", offset=head).astype(np.float32).reshape(dims)


def write(path: str | os.PathLike, array) -> None:
    Path(path).write_bytes(encode(array))


def read(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())

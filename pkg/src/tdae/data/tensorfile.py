"""Binary tensor container.

Layout, all little-endian:

    magic   4 bytes  b"TDAE"
    version u8       currently 1
    dtype   u8       1 = float32, 2 = float64, 3 = uint8 (label masks)
    rank    u8
    dims    rank x u64
    payload product(dims) x itemsize, row-major

Round trips are bitwise: write(read(b)) == b.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import (
    BadMagicError,
    ParameterError,
    TruncatedPayloadError,
    UnsupportedFormatError,
)

MAGIC = b"TDAE"
VERSION = 1

_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype(np.uint8)}
_KIND_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint8): 3}


def encode_tensor(arr: np.ndarray) -> bytes:
    code = _KIND_TO_CODE.get(np.dtype(arr.dtype))
    if code is None:
        raise ParameterError(f"unsupported dtype {arr.dtype}; use f32, f64, or u8")
    if arr.ndim < 1:
        arr = arr.reshape(1)
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(_CODE_TO_DTYPE[code], copy=False).tobytes()
    return head + payload


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 7:
        raise TruncatedPayloadError("header ends before dtype/rank fields")
    version, code, rank = struct.unpack_from("<BBB", blob, 4)
    if version != VERSION:
        raise UnsupportedFormatError(f"unsupported container version {version}")
    dtype = _CODE_TO_DTYPE.get(code)
    if dtype is None:
        raise UnsupportedFormatError(f"unknown dtype code {code}")
    dims_end = 7 + 8 * rank
    if len(blob) < dims_end:
        raise TruncatedPayloadError(f"header declares rank {rank} but dims are cut short")
    dims = struct.unpack_from(f"<{rank}Q", blob, 7)
    expected = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize if rank else dtype.itemsize
    payload = blob[dims_end:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes, header declares {expected}"
        )
    if len(payload) > expected:
        raise UnsupportedFormatError(f"{len(payload) - expected} trailing bytes after payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("="), copy=False)


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())

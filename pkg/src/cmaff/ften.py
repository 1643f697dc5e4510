"""FTEN v1 binary tensor files.

Layout: magic ``FTEN``, little-endian u32 version (=1), u32 ndim, ndim u32
dims, u32 dtype code (0 = float32), then the row-major float32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"FTEN"
VERSION = 1
DTYPE_F32 = 0
_MAX_NDIM = 8


def write_ften(path, array) -> None:
    """Write an array as FTEN v1 (always stored as float32)."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > _MAX_NDIM:
        raise FormatError(f"FTEN supports 1..{_MAX_NDIM} dimensions, got {arr.ndim}")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<I", DTYPE_F32)
    Path(path).write_bytes(header + arr.astype("<f4").tobytes())


def read_ften(path) -> np.ndarray:
    """Read an FTEN v1 file, rejecting wrong magic, version, dtype, or size."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if ndim < 1 or ndim > _MAX_NDIM:
        raise FormatError(f"{path}: unreasonable ndim {ndim}")
    need = 12 + 4 * ndim + 4
    if len(blob) < need:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", blob, 12)
    (dtype_code,) = struct.unpack_from("<I", blob, 12 + 4 * ndim)
    if dtype_code != DTYPE_F32:
        raise FormatError(f"{path}: unknown dtype code {dtype_code}")
    count = 1
    for d in dims:
        count *= d
    payload = blob[need:]
    if len(payload) != 4 * count:
        raise FormatError(
            f"{path}: payload length {len(payload)} does not match dims {dims}"
        )
    data = np.frombuffer(payload, dtype="<f4", count=count)
    return data.reshape(dims).astype(np.float32)

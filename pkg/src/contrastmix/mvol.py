"""MVOL file I/O: bit-exact persistence for volumes and label maps.

Layout (little-endian):
  bytes 0-5    magic ``MVOL1\\0``
  byte 6       dtype code: 1 = f32 intensity volume, 2 = u8 label map
  byte 7       class count C (0 for intensity volumes)
  bytes 8-19   three u32 dims (nx, ny, nz)
  bytes 20-31  three f32 spacings in mm
  bytes 32-    payload, x-fastest
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import LabelMap, Spacing, Volume

MAGIC = b"MVOL1\0"
HEADER = struct.Struct("<6sBB3I3f")
DTYPE_F32 = 1
DTYPE_U8 = 2


class MvolError(ValueError):
    """Malformed MVOL file."""


class BadMagicError(MvolError):
    pass


class TruncatedError(MvolError):
    pass


class ZeroDimsError(MvolError):
    pass


class UnknownDtypeError(MvolError):
    pass


def write_mvol(path, v: Volume | LabelMap) -> None:
    path = Path(path)
    if isinstance(v, Volume):
        dtype, nclasses = DTYPE_F32, 0
        payload = v.data.astype("<f4").ravel(order="F").tobytes()
        spacing = v.spacing
    elif isinstance(v, LabelMap):
        dtype, nclasses = DTYPE_U8, v.num_classes
        payload = v.labels.ravel(order="F").tobytes()
        spacing = v.spacing
    else:
        raise TypeError(f"cannot serialize {type(v).__name__}")
    nx, ny, nz = v.dims
    header = HEADER.pack(MAGIC, dtype, nclasses, nx, ny, nz, spacing.dx, spacing.dy, spacing.dz)
    path.write_bytes(header + payload)


def read_mvol(path) -> Volume | LabelMap:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise TruncatedError(f"{path}: file shorter than the 32-byte header")
    magic, dtype, nclasses, nx, ny, nz, dx, dy, dz = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if nx == 0 or ny == 0 or nz == 0:
        raise ZeroDimsError(f"{path}: zero dims ({nx}, {ny}, {nz})")
    count = nx * ny * nz
    spacing = Spacing(dx, dy, dz)
    body = raw[HEADER.size:]
    if dtype == DTYPE_F32:
        if len(body) != 4 * count:
            raise TruncatedError(f"{path}: expected {4 * count} payload bytes, got {len(body)}")
        data = np.frombuffer(body, dtype="<f4").reshape((nx, ny, nz), order="F")
        return Volume(np.ascontiguousarray(data), spacing)
    if dtype == DTYPE_U8:
        if len(body) != count:
            raise TruncatedError(f"{path}: expected {count} payload bytes, got {len(body)}")
        labels = np.frombuffer(body, dtype=np.uint8).reshape((nx, ny, nz), order="F")
        return LabelMap(np.ascontiguousarray(labels), spacing, nclasses)
    raise UnknownDtypeError(f"{path}: unknown dtype code {dtype}")

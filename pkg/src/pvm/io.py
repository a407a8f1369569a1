"""PVMT tensor files and P5 graymap mask renders.

PVMT layout (all integers little-endian)::

    b"PVMT" | version:u8 | dtype:u8 | rank:u32 | dims:u32 * rank | payload

dtype codes: 0 = float32, 1 = float64, 2 = uint8 mask.  The payload is the
row-major little-endian array.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .errors import PVMError

MAGIC = b"PVMT"
VERSION = 1

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


class PVMTFormatError(PVMError, ValueError):
    pass


def _as_numpy(array) -> np.ndarray:
    if hasattr(array, "detach"):
        array = array.detach().cpu().numpy()
    arr = np.asarray(array)
    if arr.dtype == np.bool_:
        return arr.astype("u1")
    if arr.dtype in (np.float32, np.float64, np.uint8):
        return arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    raise PVMTFormatError(f"unsupported dtype {arr.dtype}; use float32, float64 or a boolean mask")


def encode_pvmt(array) -> bytes:
    arr = np.ascontiguousarray(_as_numpy(array))
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BBI", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_pvmt(data: bytes) -> np.ndarray:
    if len(data) < 10 or data[:4] != MAGIC:
        raise PVMTFormatError("not a PVMT file (bad magic)")
    version, code, rank = struct.unpack_from("<BBI", data, 4)
    if version != VERSION:
        raise PVMTFormatError(f"unsupported PVMT version {version}")
    if code not in _DTYPES:
        raise PVMTFormatError(f"unknown dtype code {code}")
    offset = 10
    dims = struct.unpack_from(f"<{rank}I", data, offset)
    offset += 4 * rank
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(data) != expected:
        raise PVMTFormatError(f"payload size mismatch: {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(dims).copy()


def save_pvmt(path: str | Path, array) -> None:
    Path(path).write_bytes(encode_pvmt(array))


def load_pvmt(path: str | Path) -> np.ndarray:
    return decode_pvmt(Path(path).read_bytes())


def save_pgm(path: str | Path, mask) -> None:
    """Write a 2-D mask as a binary P5 graymap (valid = 255, invalid = 0)."""
    arr = _as_numpy(mask)
    if arr.ndim != 2:
        raise PVMTFormatError("P5 export needs a 2-D mask")
    img = np.where(arr > 0, 255, 0).astype("u1")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def load_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if m is None:
        raise PVMTFormatError("not a P5 graymap")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise PVMTFormatError("only 8-bit graymaps are supported")
    pixels = np.frombuffer(data, dtype="u1", count=w * h, offset=m.end()).reshape(h, w)
    return pixels > 0

"""Binary tensor container ("PANC" format).

Layout, all little-endian:

    offset 0   magic  b"PANC"
    offset 4   format version, u16
    offset 6   dtype code, u8   (0 = f32, 1 = f64, 2 = u32)
    offset 7   rank, u8
    offset 8   dims, rank * u32
    then       raw row-major payload

Errors report the byte offset at which parsing failed.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PANC"
VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<u4"),
}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<u4"): 2}


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write an array (f32, f64 or u32) to a PANC file."""
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype} for PANC container")
    header = MAGIC + struct.pack("<HBB", VERSION, _CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(dt, copy=False).tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a PANC file; raises FormatError with a byte offset on damage."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"bad magic in {path!s}", offset=0)
    if len(data) < 8:
        raise FormatError(f"truncated header in {path!s}", offset=len(data))
    version, dtype_code, rank = struct.unpack_from("<HBB", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} in {path!s}", offset=4)
    if dtype_code not in _DTYPES:
        raise FormatError(f"unknown dtype code {dtype_code} in {path!s}", offset=6)
    dims_end = 8 + 4 * rank
    if len(data) < dims_end:
        raise FormatError(f"truncated dims in {path!s}", offset=len(data))
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    if rank > 0 and min(dims) < 1:
        raise FormatError(f"zero-sized dim {dims} in {path!s}", offset=8)
    dtype = _DTYPES[dtype_code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = dims_end + count * dtype.itemsize
    if len(data) != expected:
        raise FormatError(
            f"payload size mismatch in {path!s}: expected {expected} bytes, "
            f"got {len(data)}",
            offset=min(len(data), expected),
        )
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=dims_end)
    return arr.reshape(dims).copy()

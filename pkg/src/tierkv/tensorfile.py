"""Binary tensor file format (``.skvt``).

Layout, all little-endian::

    offset  size  field
    0       4     magic  b"SKVT"
    4       2     version (u16) = 1
    6       2     dtype code (u16); 1 = float32
    8       16    shape (b, h, s, d) as four u32
    24      ...   payload, row-major float32, prod(shape) * 4 bytes

Nothing follows the payload; trailing bytes are rejected.
"""

import io
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SKVT"
VERSION = 1
DTYPE_F32 = 1
HEADER = struct.Struct("<4sHH4I")


def encode_tensor(x) -> bytes:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4:
        raise ValueError(f"tensor files hold rank-4 arrays, got shape {x.shape}")
    if any(n >= 2**32 for n in x.shape):
        raise ValueError(f"dimension too large for u32 header: {x.shape}")
    return HEADER.pack(MAGIC, VERSION, DTYPE_F32, *x.shape) + x.astype("<f4").tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {HEADER.size} bytes", len(buf))
    magic, version, dtype, *shape = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}", 6)
    n = int(np.prod(shape, dtype=np.int64))
    need = HEADER.size + 4 * n
    if len(buf) < need:
        raise FormatError(f"truncated payload: expected {4 * n} bytes, found {len(buf) - HEADER.size}", len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload", need)
    return np.frombuffer(buf, dtype="<f4", count=n, offset=HEADER.size).astype(np.float32).reshape(shape)


def write_tensor(target, x) -> None:
    """Write ``x`` to a path (atomically, via temp file + rename) or a binary stream."""
    data = encode_tensor(x)
    if isinstance(target, (str, os.PathLike)):
        path = Path(target)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)
    else:
        target.write(data)


def read_tensor(source) -> np.ndarray:
    if isinstance(source, (str, os.PathLike)):
        return decode_tensor(Path(source).read_bytes())
    if isinstance(source, (bytes, bytearray)):
        return decode_tensor(bytes(source))
    if isinstance(source, io.IOBase) or hasattr(source, "read"):
        return decode_tensor(source.read())
    raise TypeError(f"cannot read a tensor from {type(source).__name__}")

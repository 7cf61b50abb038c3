"""MQT1: a minimal container for one float32 tensor.

Layout, all little-endian::

    b"MQT1"         magic
    u8              dtype (0 = float32)
    u8              ndim
    2 bytes         reserved, zero
    ndim x u32      dims
    payload         row-major values
"""

import struct
from pathlib import Path

import numpy as np

from expertbits.errors import (
    BadMagicError,
    FileAccessError,
    InvalidArgumentError,
    MissingFileError,
    NonFiniteError,
    PayloadLengthError,
    UnsupportedDtypeError,
)
from expertbits.utils import atomic_write_bytes

MAGIC = b"MQT1"
DTYPE_FLOAT32 = 0
HEADER = struct.Struct("<4sBBH")
DIM = struct.Struct("<I")

DTYPES = {DTYPE_FLOAT32: np.dtype("<f4")}


def encode_tensor(array) -> bytes:
    array = np.asarray(array)
    if not np.all(np.isfinite(array)):
        raise NonFiniteError("can't store non-finite values")
    if array.ndim > 255:
        raise InvalidArgumentError(f"too many dimensions: {array.ndim}")
    if any(dim >= 2**32 for dim in array.shape):
        raise InvalidArgumentError(f"dimension too large in shape {array.shape}")
    parts = [HEADER.pack(MAGIC, DTYPE_FLOAT32, array.ndim, 0)]
    parts.extend(DIM.pack(dim) for dim in array.shape)
    parts.append(np.ascontiguousarray(array, dtype=DTYPES[DTYPE_FLOAT32]).tobytes())
    return b"".join(parts)


def decode_tensor(data: bytes, name: str = "tensor") -> np.ndarray:
    if len(data) < HEADER.size:
        raise BadMagicError(f"{name}: too short to be an MQT1 file")
    magic, dtype_code, ndim, reserved = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"{name}: bad magic {magic!r}")
    if dtype_code not in DTYPES:
        raise UnsupportedDtypeError(f"{name}: unsupported dtype code {dtype_code}")
    if reserved != 0:
        raise BadMagicError(f"{name}: reserved header bytes are not zero")
    offset = HEADER.size
    if len(data) < offset + ndim * DIM.size:
        raise PayloadLengthError(f"{name}: payload length mismatch in dims")
    dims = [DIM.unpack_from(data, offset + i * DIM.size)[0] for i in range(ndim)]
    offset += ndim * DIM.size

    dtype = DTYPES[dtype_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset != expected:
        raise PayloadLengthError(
            f"{name}: payload length mismatch, expected {expected} bytes, "
            + f"found {len(data) - offset}"
        )
    if expected == 0:
        return np.zeros(dims, dtype=dtype)
    array = np.frombuffer(data, dtype=dtype, offset=offset).reshape(dims)
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{name}: contains non-finite values")
    return array.copy()


def write_tensor(path: str | Path, array) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise MissingFileError(f"missing tensor file {path}") from None
    except OSError as exc:
        raise FileAccessError(f"couldn't read {path}: {exc.strerror or exc}") from exc
    return decode_tensor(data, name=str(path))

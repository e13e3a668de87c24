"""Portable binary tensor files.

Layout (little-endian):
    magic   4 bytes  b"PXMT"
    version u32      FORMAT_VERSION
    dtype   u32      1 = float32, 2 = float64
    rank    u32
    extents u64 * rank
    payload raw row-major values
"""

import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import ValidationError
from .tensor import Tensor


MAGIC = b"PXMT"
FORMAT_VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}


class TensorFileError(ValidationError):
    """Raised when a tensor file is malformed or unsupported."""

    pass


def encode_tensor(value: Union[Tensor, np.ndarray]) -> bytes:
    """Encode a tensor into the portable byte layout."""
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    tag = DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        raise TensorFileError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<III", FORMAT_VERSION, tag, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(blob: bytes) -> Tensor:
    """Decode bytes produced by encode_tensor.

    Raises:
        TensorFileError: On bad magic, version, dtype tag or payload size
    """
    if blob[:4] != MAGIC:
        raise TensorFileError("bad magic bytes (expected PXMT)")
    if len(blob) < 16:
        raise TensorFileError("truncated header")
    version, tag, rank = struct.unpack_from("<III", blob, 4)
    if version != FORMAT_VERSION:
        raise TensorFileError(f"unsupported format version {version}")
    if tag not in TAG_DTYPES:
        raise TensorFileError(f"unknown dtype tag {tag}")
    if len(blob) < 16 + 8 * rank:
        raise TensorFileError("truncated header")
    offset = 16
    shape = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    dtype = TAG_DTYPES[tag]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise TensorFileError(
            f"payload is {len(payload)} bytes, shape {shape} needs {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return Tensor(arr.astype(dtype.newbyteorder("="), copy=True))


def save_tensor(path: Union[str, Path], value: Union[Tensor, np.ndarray]) -> Path:
    """Write one tensor file, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(value))
    return path


def load_tensor(path: Union[str, Path]) -> Tensor:
    """Read one tensor file."""
    path = Path(path)
    if not path.exists():
        raise TensorFileError(f"tensor file not found: {path}")
    return decode_tensor(path.read_bytes())

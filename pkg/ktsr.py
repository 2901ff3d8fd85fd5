"""
KTSR tensor files.

Layout (little-endian, no padding):
    magic   4 bytes  b"KTSR"
    version u32      1
    dtype   u8       0 = float32
    ndim    u32
    extents ndim x u32
    payload float32 row-major
"""
import logging
import os
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from errors import FormatError, StorageError

logger = logging.getLogger(__name__)

MAGIC = b"KTSR"
VERSION = 1
DTYPE_F32 = 0

_PREAMBLE = struct.Struct("<4sIBI")

PathLike = Union[str, Path]


def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize an array as one KTSR record."""
    array = np.asarray(array)
    if not np.issubdtype(array.dtype, np.floating):
        array = array.astype(np.float32)
    header = _PREAMBLE.pack(MAGIC, VERSION, DTYPE_F32, array.ndim)
    extents = struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    return header + extents + payload


def decode_tensor(buffer: bytes, offset: int = 0, source: str = "<buffer>") -> Tuple[np.ndarray, int]:
    """
    Parse one KTSR record starting at ``offset``.

    Returns:
        (array, offset just past the record)
    """
    if len(buffer) - offset < _PREAMBLE.size:
        raise FormatError(f"{source}: truncated KTSR header")
    magic, version, dtype, ndim = _PREAMBLE.unpack_from(buffer, offset)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported KTSR version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{source}: unsupported dtype code {dtype}")
    offset += _PREAMBLE.size
    if len(buffer) - offset < 4 * ndim:
        raise FormatError(f"{source}: truncated extents")
    shape = struct.unpack_from(f"<{ndim}I", buffer, offset)
    offset += 4 * ndim
    count = int(np.prod(shape, dtype=np.int64))
    end = offset + 4 * count
    if len(buffer) < end:
        raise FormatError(f"{source}: payload holds {(len(buffer) - offset) // 4} of {count} values")
    array = np.frombuffer(buffer, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)
    return array, end


def write_tensor(path: PathLike, array: np.ndarray):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(encode_tensor(array))
        os.replace(tmp, path)
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    logger.debug(f"wrote {path} shape={tuple(np.shape(array))}")


def read_tensor(path: PathLike) -> np.ndarray:
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    array, end = decode_tensor(buffer, 0, source=str(path))
    if end != len(buffer):
        raise FormatError(f"{path}: {len(buffer) - end} trailing bytes after tensor payload")
    return array

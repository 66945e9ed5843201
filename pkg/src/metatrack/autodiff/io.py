"""Flat binary tensor format.

Layout (all integers little-endian)::

    b"MDT1"            magic
    uint8              precision: 4 = single, 8 = double
    uint32             rank
    uint64 * rank      dims
    raw values         row-major, little-endian
"""

import struct

import numpy as np

MAGIC = b"MDT1"
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def write_tensor(fh, array):
    array = np.asarray(array)
    if array.dtype not in (np.float32, np.float64):
        raise TypeError(f"only float32/float64 tensors are serializable, got {array.dtype}")
    width = array.dtype.itemsize
    fh.write(MAGIC)
    fh.write(struct.pack("<BI", width, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=_DTYPES[width]).tobytes())


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated tensor stream: wanted {n} bytes, got {len(data)}")
    return data


def read_tensor(fh):
    magic = _read_exact(fh, 4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    width, rank = struct.unpack("<BI", _read_exact(fh, 5))
    if width not in _DTYPES:
        raise FormatError(f"unknown precision byte {width}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    data = _read_exact(fh, count * width)
    native = np.float32 if width == 4 else np.float64
    return np.frombuffer(data, dtype=_DTYPES[width]).astype(native).reshape(shape)


def save_tensor(path, array):
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor(fh)

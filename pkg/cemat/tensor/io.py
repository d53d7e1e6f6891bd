"""Flat binary array files.

Array layout (all integers little-endian):

    magic    4 bytes  b"CMAT"
    dtype    1 byte   1 = float32, 2 = float64, 3 = int64
    ndim     1 byte
    dims     ndim x uint32
    values   product(dims) raw little-endian values, C order

A named-array file (used for checkpoints) is a uint32 entry count followed by
entries of uint16 name length, utf-8 name and one array in the layout above.
"""

import struct
from typing import BinaryIO, Dict, Mapping

import numpy as np

from cemat.errors import DataError

MAGIC = b"CMAT"
_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_DTYPES = {code: dtype for dtype, code in _CODES.items()}


def write_array(file: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in _CODES:
        raise DataError(f"Unsupported array dtype: {array.dtype}")
    file.write(MAGIC)
    file.write(struct.pack("<BB", _CODES[dtype], array.ndim))
    file.write(struct.pack(f"<{array.ndim}I", *array.shape))
    file.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def _read_exact(file: BinaryIO, size: int) -> bytes:
    data = file.read(size)
    if len(data) != size:
        raise DataError("Truncated array file")
    return data


def read_array(file: BinaryIO) -> np.ndarray:
    if _read_exact(file, 4) != MAGIC:
        raise DataError("Not an array file: bad magic")
    code, ndim = struct.unpack("<BB", _read_exact(file, 2))
    if code not in _DTYPES:
        raise DataError(f"Unknown array dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(file, 4 * ndim))
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    values = np.frombuffer(_read_exact(file, count * dtype.itemsize), dtype=dtype)
    return values.reshape(shape).astype(dtype.newbyteorder("="))


def save_arrays(path: str, arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as file:
        file.write(struct.pack("<I", len(arrays)))
        for name, array in arrays.items():
            encoded = name.encode("utf-8")
            file.write(struct.pack("<H", len(encoded)))
            file.write(encoded)
            write_array(file, array)


def load_arrays(path: str) -> Dict[str, np.ndarray]:
    """Read a named-array file, preserving entry order."""
    try:
        file = open(path, "rb")
    except FileNotFoundError:
        raise DataError(f"Array file not found: {path}")
    with file:
        (count,) = struct.unpack("<I", _read_exact(file, 4))
        arrays = {}
        for _ in range(count):
            (length,) = struct.unpack("<H", _read_exact(file, 2))
            name = _read_exact(file, length).decode("utf-8")
            arrays[name] = read_array(file)
        return arrays

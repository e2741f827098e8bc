"""Minimal NPY v1.0 reader/writer for float tensors.

Only version 1.0, C-order, little-endian float32/float64 is accepted.
Arrays of rank 2 or 3 are left-padded with unit extents to rank 4.
"""

from __future__ import annotations

import ast
import os

import numpy as np

from .errors import FormatError
from .tensor import Tensor4

MAGIC = b"\x93NUMPY"
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}
_ALIGN = 64


def _parse_header(raw: bytes, path) -> tuple[np.dtype, tuple[int, ...]]:
    if raw[:6] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:6]!r}")
    if len(raw) < 10:
        raise FormatError(f"{path}: truncated header")
    version = (raw[6], raw[7])
    if version != (1, 0):
        raise FormatError(f"{path}: unsupported version {version[0]}.{version[1]} (need 1.0)")
    hlen = int.from_bytes(raw[8:10], "little")
    text = raw[10 : 10 + hlen]
    if len(text) != hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = ast.literal_eval(text.decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"{path}: unparsable header dict") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise FormatError(f"{path}: header must hold exactly descr/fortran_order/shape")

    descr = header["descr"]
    if descr not in _DTYPES:
        raise FormatError(f"{path}: unsupported descr {descr!r} (need '<f4' or '<f8')")
    if header["fortran_order"] is not False:
        raise FormatError(f"{path}: fortran_order must be False")
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise FormatError(f"{path}: invalid shape {shape!r}")
    if not 2 <= len(shape) <= 4:
        raise FormatError(f"{path}: shape rank {len(shape)} outside 2..4")
    return _DTYPES[descr], shape


def read_npy(path) -> Tensor4:
    with open(path, "rb") as fh:
        raw = fh.read()
    dtype, shape = _parse_header(raw, path)
    offset = 10 + int.from_bytes(raw[8:10], "little")
    count = int(np.prod(shape))
    payload = raw[offset:]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(
            f"{path}: data size {len(payload)} bytes, expected {count * dtype.itemsize}"
        )
    arr = np.frombuffer(payload, dtype=dtype, count=count).reshape(shape)
    arr = arr.reshape((1,) * (4 - len(shape)) + shape)
    return Tensor4(arr.astype(np.float32))


def encode_npy(arr: np.ndarray) -> bytes:
    """Serialize a C-order little-endian array with a v1.0 header."""
    arr = np.ascontiguousarray(arr)
    descr = arr.dtype.str
    if descr.startswith(">"):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        descr = arr.dtype.str
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {tuple(arr.shape)!r}, }}"
    # pad with spaces so the data section is aligned; header ends with newline
    total = len(MAGIC) + 4 + len(header) + 1
    header += " " * ((-total) % _ALIGN) + "\n"
    return MAGIC + bytes([1, 0]) + len(header).to_bytes(2, "little") + header.encode("latin1") + arr.tobytes()


def write_npy(t, path) -> None:
    """Write a tensor (or any numeric array) as float32 NPY, atomically."""
    arr = np.asarray(t, dtype="<f4")
    _atomic_write_bytes(path, encode_npy(arr))


def write_array_npy(arr, path) -> None:
    """Write an arbitrary numeric array (e.g. integer labels) preserving dtype."""
    _atomic_write_bytes(path, encode_npy(np.asarray(arr)))


def read_array_npy(path) -> np.ndarray:
    """Read any v1.0 C-order NPY via numpy; used for label vectors."""
    return np.load(path, allow_pickle=False)


def _atomic_write_bytes(path, blob: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)

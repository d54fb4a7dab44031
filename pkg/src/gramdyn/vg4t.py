"""VG4T binary tensor blobs.

Layout, all integers little-endian: magic ``VG4T`` (4 ASCII bytes),
version u16 (= 1), dtype u8 (0 = float32-le, 1 = uint8), ndim u8,
ndim x u32 dims, then the row-major payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, IoError, NotFound, SchemaError

MAGIC = b"VG4T"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype(np.uint8)}


@dataclass
class TensorBlob:
    """A dense row-major tensor with an explicit on-disk dtype."""

    dtype: str  # "f32-le" or "u8"
    dims: tuple[int, ...]
    payload: np.ndarray

    def validate(self) -> None:
        if len(self.dims) == 0:
            raise SchemaError("blob dims must be non-empty")
        if any(d < 1 for d in self.dims):
            raise SchemaError(f"blob dims must all be >= 1, got {self.dims}")
        if tuple(self.payload.shape) != tuple(self.dims):
            raise SchemaError(
                f"payload shape {self.payload.shape} != declared dims {self.dims}"
            )


def _as_storage_array(array: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.uint8:
        return arr
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return arr.astype("<f4", copy=False)


def write_blob(path: str | Path, array: np.ndarray) -> None:
    """Write *array* (float32 or uint8, anything else cast to float32)."""
    arr = _as_storage_array(array)
    code = _DTYPE_CODES[np.dtype(np.uint8) if arr.dtype == np.uint8 else np.dtype(np.float32)]
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(arr.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write blob {path}: {exc}") from exc


def read_blob(path: str | Path) -> np.ndarray:
    """Read a VG4T blob back into a numpy array."""
    path = Path(path)
    if not path.exists():
        raise NotFound(f"blob not found: {path}")
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read blob {path}: {exc}") from exc
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a VG4T blob")
    version, code, ndim = struct.unpack_from("<HBB", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if ndim < 1:
        raise SchemaError(f"{path}: ndim must be >= 1")
    header_end = 8 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    if any(d < 1 for d in dims):
        raise SchemaError(f"{path}: dims must all be >= 1, got {dims}")
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = raw[header_end:]
    if len(payload) != expected:
        raise SchemaError(
            f"{path}: payload is {len(payload)} bytes, dims {dims} require {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def expect_shape(array: np.ndarray, shape: tuple[int, ...], name: str) -> np.ndarray:
    """Check *array* against a declared shape, naming the tensor on failure."""
    if tuple(array.shape) != tuple(shape):
        raise SchemaError(f"tensor {name!r}: dims {array.shape} do not match declared {shape}")
    return array

"""GSSC binary array format and checkpoint directories.

Layout: magic b"GSSC", version u32 LE, dtype code u32 (0 = float64,
1 = uint8 labels), rank u32, extents u32 each, then the row-major
payload.  Round-trips are bit-exact.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"GSSC"
VERSION = 1

DTYPE_F64 = 0
DTYPE_U8 = 1

_DTYPES = {DTYPE_F64: np.dtype("<f8"), DTYPE_U8: np.dtype("u1")}


class GsscFormatError(IOError):
    pass


def write_gssc(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    if array.dtype == np.uint8:
        code = DTYPE_U8
    else:
        array = array.astype("<f8")
        code = DTYPE_F64
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, code, array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def read_gssc(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise GsscFormatError(f"{path}: bad magic {magic!r}")
        version, code, rank = struct.unpack("<III", f.read(12))
        if version != VERSION:
            raise GsscFormatError(f"{path}: unsupported version {version}")
        if code not in _DTYPES:
            raise GsscFormatError(f"{path}: unknown dtype code {code}")
        extents = struct.unpack(f"<{rank}I", f.read(4 * rank))
        dtype = _DTYPES[code]
        n = int(np.prod(extents)) if rank else 1
        payload = f.read(n * dtype.itemsize)
        if len(payload) != n * dtype.itemsize:
            raise GsscFormatError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype=dtype).reshape(extents).copy()


def save_params(dirpath, params: dict[str, Tensor]) -> None:
    os.makedirs(dirpath, exist_ok=True)
    names = sorted(params)
    with open(os.path.join(dirpath, "manifest.txt"), "w") as f:
        for name in names:
            f.write(name + "\n")
    for name in names:
        fname = name.replace("/", "_") + ".gssc"
        write_gssc(os.path.join(dirpath, fname), params[name].data)


def load_params(dirpath, params: dict[str, Tensor]) -> None:
    """Load a checkpoint into an existing parameter dict, in place."""
    manifest = os.path.join(dirpath, "manifest.txt")
    with open(manifest) as f:
        names = [line.strip() for line in f if line.strip()]
    missing = set(params) - set(names)
    if missing:
        raise GsscFormatError(f"checkpoint {dirpath} missing parameters: {sorted(missing)}")
    for name in names:
        if name not in params:
            continue
        arr = read_gssc(os.path.join(dirpath, name.replace("/", "_") + ".gssc"))
        if arr.shape != params[name].data.shape:
            raise GsscFormatError(
                f"checkpoint {name}: shape {arr.shape} vs expected {params[name].data.shape}")
        params[name].data = np.ascontiguousarray(arr, dtype=np.float64)

"""Binary tensor records.

Layout of one record (all little-endian)::

    b"PQT1" | dtype u8 | ndim u8 | dims u32 * ndim | payload

dtype 0 is float32 (datasets, exported matrices); dtype 1 is float64, used for
checkpoints so that a reloaded model reproduces the in-memory one exactly.
A file may hold several records back to back.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import TensorFileError

MAGIC = b"PQT1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {v: k for k, v in DTYPES.items()}


def write_tensor(fh, array, dtype: str = "f32") -> None:
    arr = np.asarray(array)
    dt = DTYPES[0] if dtype == "f32" else DTYPES[1]
    if arr.ndim > 255:
        raise TensorFileError("too many dimensions")
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", CODES[dt], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(fh) -> np.ndarray:
    head = fh.read(4)
    if len(head) == 0:
        raise EOFError
    if head != MAGIC:
        raise TensorFileError(f"bad magic {head!r}")
    meta = fh.read(2)
    if len(meta) != 2:
        raise TensorFileError("truncated header")
    code, ndim = struct.unpack("<BB", meta)
    if code not in DTYPES:
        raise TensorFileError(f"unknown dtype code {code}")
    raw = fh.read(4 * ndim)
    if len(raw) != 4 * ndim:
        raise TensorFileError("truncated dims")
    dims = struct.unpack(f"<{ndim}I", raw)
    dt = DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    payload = fh.read(count * dt.itemsize)
    if len(payload) != count * dt.itemsize:
        raise TensorFileError("truncated payload")
    return np.frombuffer(payload, dtype=dt).reshape(dims).copy()


def save_tensors(path, arrays, dtype: str = "f32") -> None:
    buf = io.BytesIO()
    for a in arrays:
        write_tensor(buf, a, dtype)
    try:
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise TensorFileError(str(exc)) from exc


def load_tensors(path) -> list[np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise TensorFileError(str(exc)) from exc
    fh = io.BytesIO(data)
    out = []
    while True:
        try:
            out.append(read_tensor(fh))
        except EOFError:
            return out

"""On-disk formats: float32 matrices with a small header, canonical JSON."""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<II")


def write_matrix(path, matrix):
    """Write a 2-d array as ``rows, cols`` (uint32 LE) followed by float32 LE data."""
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    rows, cols = m.shape
    data = np.ascontiguousarray(m, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(rows, cols))
        fh.write(data.tobytes(order="C"))


def read_matrix(path):
    """Inverse of :func:`write_matrix`; returns float64."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    rows, cols = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {rows}x{cols}, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.reshape(rows, cols).astype(np.float64)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def digest(obj, length=12):
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:length]


def array_hash(arr):
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(str(arr.dtype).encode())
    h.update(arr.tobytes())
    return h.hexdigest()

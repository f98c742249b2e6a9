"""Feature-set files: CSV with a ``dim0..dim{n-1}`` header, and the binary FSET layout.

FSET layout (all little-endian)::

    b"FSET"          4-byte magic
    u8   version     currently 1
    u32  count
    u32  dim
    f64  payload     count * dim values, row-major
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

from raregen.errors import FormatError

FSET_MAGIC = b"FSET"
FSET_VERSION = 1
_HEADER = struct.Struct("<4sBII")


def to_fset_bytes(points) -> bytes:
    arr = np.ascontiguousarray(np.asarray(points, dtype="<f8"))
    if arr.ndim != 2:
        raise FormatError(f"expected a 2-D array, got shape {arr.shape}")
    return _HEADER.pack(FSET_MAGIC, FSET_VERSION, arr.shape[0], arr.shape[1]) + arr.tobytes()


def from_fset_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError("file too short for an FSET header")
    magic, version, count, dim = _HEADER.unpack_from(blob)
    if magic != FSET_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FSET_VERSION:
        raise FormatError(f"unsupported FSET version {version}")
    expected = _HEADER.size + 8 * count * dim
    if len(blob) != expected:
        raise FormatError(f"payload length {len(blob) - _HEADER.size} != {8 * count * dim}")
    return np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(count, dim).astype(np.float64)


def save_fset(path, points) -> None:
    Path(path).write_bytes(to_fset_bytes(points))


def load_fset(path) -> np.ndarray:
    return from_fset_bytes(Path(path).read_bytes())


def to_csv_text(points) -> str:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"expected a 2-D array, got shape {arr.shape}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"dim{i}" for i in range(arr.shape[1])])
    for row in arr:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def from_csv_text(text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError("empty CSV")
    header = rows[0]
    if header != [f"dim{i}" for i in range(len(header))]:
        raise FormatError(f"unexpected CSV header {header[:4]}...")
    try:
        values = [[float(v) for v in row] for row in rows[1:] if row]
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    if any(len(r) != len(header) for r in values):
        raise FormatError("ragged CSV rows")
    return np.array(values, dtype=np.float64).reshape(len(values), len(header))


def save_csv(path, points) -> None:
    Path(path).write_text(to_csv_text(points))


def load_csv(path) -> np.ndarray:
    return from_csv_text(Path(path).read_text())


def load_features(path) -> np.ndarray:
    """Load either format, chosen by file extension (``.csv`` or anything else as FSET)."""
    path = Path(path)
    return load_csv(path) if path.suffix.lower() == ".csv" else load_fset(path)

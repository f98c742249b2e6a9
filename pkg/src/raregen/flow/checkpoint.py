"""GFLW checkpoint files.

Layout (little-endian)::

    b"GFLW"                       magic
    u8    version                 currently 1
    u32 x 5                       input_dim, n_blocks, flows_per_block, groups, hidden
    f64                           scaler epsilon
    f64[input_dim]                scaler minimum
    f64[input_dim]                scaler maximum
    f64[...]                      every layer in forward order; within a layer its
                                  learnable arrays then its fixed arrays, each in the
                                  order listed by ``parameter_layout``

Arrays are stored row-major.  Loading rejects other versions and any
length mismatch.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from raregen.errors import FormatError
from raregen.flow.model import FlowConfig, FlowModel, MinMaxScaler, build_layers, iter_layers

MAGIC = b"GFLW"
VERSION = 1
_HEAD = struct.Struct("<4sB5Id")


def parameter_layout(config: FlowConfig) -> list[tuple[str, tuple, bool]]:
    """``(name, shape, learnable)`` for every stored array, in file order."""
    out = []
    for layer in iter_layers(build_layers(config)):
        out += [(f"{layer.name}.{k}", s, True) for k, s in layer.param_shapes().items()]
        out += [(f"{layer.name}.{k}", s, False) for k, s in layer.buffer_shapes().items()]
    return out


def to_bytes(model: FlowModel) -> bytes:
    c = model.config
    parts = [_HEAD.pack(MAGIC, VERSION, c.input_dim, c.n_blocks, c.flows_per_block, c.groups, c.hidden, model.scaler.eps)]
    parts.append(np.asarray(model.scaler.low, dtype="<f8").tobytes())
    parts.append(np.asarray(model.scaler.high, dtype="<f8").tobytes())
    for name, shape, learnable in parameter_layout(c):
        arr = (model.params if learnable else model.buffers)[name]
        parts.append(np.ascontiguousarray(arr, dtype="<f8").reshape(shape).tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> FlowModel:
    if len(blob) < _HEAD.size:
        raise FormatError("file too short for a GFLW header")
    magic, version, dim, blocks, flows, groups, hidden, eps = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported GFLW version {version} (expected {VERSION})")
    config = FlowConfig(dim, blocks, flows, groups, hidden)
    layout = parameter_layout(config)
    expected = _HEAD.size + 8 * (2 * dim + sum(int(np.prod(s)) for _, s, _ in layout))
    if len(blob) != expected:
        raise FormatError(f"checkpoint length {len(blob)} != expected {expected}")
    values = np.frombuffer(blob, dtype="<f8", offset=_HEAD.size).astype(np.float64)
    low, high = values[:dim].copy(), values[dim : 2 * dim].copy()
    pos = 2 * dim
    params, buffers = {}, {}
    for name, shape, learnable in layout:
        size = int(np.prod(shape))
        (params if learnable else buffers)[name] = values[pos : pos + size].reshape(shape).copy()
        pos += size
    return FlowModel(config, MinMaxScaler(low, high, eps), params, buffers)


def save_checkpoint(path, model: FlowModel) -> str:
    """Write ``model`` and return the SHA-256 of the file contents."""
    blob = to_bytes(model)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> FlowModel:
    return from_bytes(Path(path).read_bytes())

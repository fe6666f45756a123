"""Binary checkpoint format for :class:`~cvsurrogate.surrogate.MLP`.

Layout, version 1, every field little-endian::

    offset  size        field
    0       8           magic b"CVSURRNN"
    8       4   u32     format version (1)
    12      4   u32     output activation (0 = identity, 1 = abs)
    16      8   f64     dropout rate
    24      8   f64     box edge length, nm
    32      4   u32     number of linear layers n
    36      4(n+1) u32  layer manifest: widths d0, d1, ..., dn
    ...                 per layer l: W_l as d_l x d_{l+1} row-major f64, then b_l (d_{l+1} f64)
    end-4   4   u32     CRC-32 of all preceding bytes

Loading reproduces every parameter bit for bit.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .geometry import SimBox
from .surrogate import MLP, OUTPUT_ACTIVATIONS

MAGIC = b"CVSURRNN"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sIIddI")


class CheckpointError(ValueError):
    pass


def dumps(model: MLP) -> bytes:
    dims = model.dims
    parts = [
        _HEAD.pack(MAGIC, FORMAT_VERSION, OUTPUT_ACTIVATIONS.index(model.output_activation),
                   model.dropout, model.box.edge_length, model.n_layers),
        struct.pack(f"<{len(dims)}I", *dims),
    ]
    for w, b in zip(model.weights, model.biases):
        parts.append(w.astype("<f8").tobytes(order="C"))
        parts.append(b.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes) -> MLP:
    if len(data) < _HEAD.size or data[:8] != MAGIC:
        raise CheckpointError("bad checkpoint header")
    magic, version, act, dropout, box_length, n_layers = _HEAD.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if act >= len(OUTPUT_ACTIVATIONS):
        raise CheckpointError(f"unknown output activation tag {act}")
    if len(data) < 4 or struct.unpack("<I", data[-4:])[0] != zlib.crc32(data[:-4]):
        raise CheckpointError("checkpoint checksum mismatch")
    offset = _HEAD.size
    try:
        dims = struct.unpack_from(f"<{n_layers + 1}I", data, offset)
    except struct.error as exc:
        raise CheckpointError("truncated layer manifest") from exc
    offset += 4 * (n_layers + 1)
    expected = offset + 8 * sum(a * b + b for a, b in zip(dims[:-1], dims[1:])) + 4
    if len(data) != expected:
        raise CheckpointError(f"checkpoint size {len(data)} does not match manifest (expected {expected})")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=offset)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.reshape(fan_in, fan_out).astype(np.float64))
        biases.append(b.astype(np.float64))
    return MLP(weights, biases, box=SimBox(box_length), output_activation=OUTPUT_ACTIVATIONS[act], dropout=dropout)


def save_checkpoint(model: MLP, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_checkpoint(path) -> MLP:
    return loads(Path(path).read_bytes())

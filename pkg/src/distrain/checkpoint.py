"""Flat binary parameter checkpoints.

Layout (all integers little-endian unsigned 64-bit):

    magic "DSTR1" (5 bytes)
    topology-string length, topology string (utf-8)
    entry count
    per entry: name length, name bytes (utf-8), rank, extents, raw
    little-endian float32 values in row-major order

The topology string is the model's layer descriptor, so a checkpoint
alone suffices to rebuild the network for evaluation or explanation.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .layers import Model

MAGIC = b"DSTR1"


def _pack_u64(value: int) -> bytes:
    return struct.pack("<Q", value)


def save_arrays(path, topology: str, entries: list[tuple[str, np.ndarray]]) -> None:
    """Write named float32 arrays under the given topology string."""
    blob = bytearray()
    blob += MAGIC
    topo = topology.encode("utf-8")
    blob += _pack_u64(len(topo)) + topo
    blob += _pack_u64(len(entries))
    for name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        blob += _pack_u64(len(name_b)) + name_b
        blob += _pack_u64(arr.ndim)
        for extent in arr.shape:
            blob += _pack_u64(extent)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_arrays(path) -> tuple[str, list[tuple[str, np.ndarray]]]:
    """Read back (topology, named arrays); validates the container."""
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise DataError(f"not a checkpoint (bad magic) in {path}")
    pos = 5

    def take_u64() -> int:
        nonlocal pos
        if pos + 8 > len(data):
            raise DataError(f"truncated checkpoint: {path}")
        value = struct.unpack_from("<Q", data, pos)[0]
        pos += 8
        return value

    topo_len = take_u64()
    topology = data[pos : pos + topo_len].decode("utf-8")
    pos += topo_len
    count = take_u64()
    entries = []
    for _ in range(count):
        name_len = take_u64()
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        rank = take_u64()
        shape = tuple(take_u64() for _ in range(rank))
        n_values = int(np.prod(shape)) if shape else 1
        raw = data[pos : pos + 4 * n_values]
        if len(raw) != 4 * n_values:
            raise DataError(f"truncated checkpoint values: {path}")
        pos += 4 * n_values
        entries.append((name, np.frombuffer(raw, dtype="<f4").reshape(shape).copy()))
    return topology, entries


def save_model(path, model: Model) -> None:
    save_arrays(
        path, model.descriptor(), [(n, t.data) for n, t in model.named_parameters()]
    )


def load_model(path) -> Model:
    topology, entries = load_arrays(path)
    model = Model.from_descriptor(topology)
    params = dict(model.named_parameters())
    if set(params) != {name for name, _ in entries}:
        raise DataError(f"checkpoint parameter names mismatch topology in {path}")
    for name, arr in entries:
        if params[name].data.shape != arr.shape:
            raise DataError(
                f"checkpoint entry {name} has shape {arr.shape}, "
                f"model expects {params[name].data.shape}"
            )
        params[name].data[...] = arr
    return model

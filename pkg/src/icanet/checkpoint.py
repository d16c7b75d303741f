"""Binary checkpoint format.

Layout (little-endian)::

    b"ICAN" | version u32 | count u32
    count x [ name_len u16 | name (UTF-8) | 4 x u32 dims | float32 values ]

Shapes of rank < 4 are right-padded with 1s; readers reshape to the target
tensor.  Run metadata (step, RNG state, configs) travels as JSON in a record
named ``meta/json`` holding one byte per float32 element, and optimizer
buffers are stored as ``momentum/<parameter name>``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ICAN"
VERSION = 1
META_KEY = "meta/json"
MOMENTUM_PREFIX = "momentum/"


class CheckpointError(ValueError):
    pass


def _dims(shape: tuple) -> tuple:
    if len(shape) > 4:
        raise CheckpointError(f"rank {len(shape)} tensors cannot be stored")
    return tuple(shape) + (1,) * (4 - len(shape))


def write_records(path, records: dict, version: int = VERSION) -> None:
    """Write named arrays as float32; the file is replaced atomically."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", version, len(records))]
    for name, arr in records.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"record name too long: {name[:40]}...")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<4I", *_dims(arr.shape)))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def read_records(path) -> dict:
    """Read every record as a float32 array of padded 4-D shape."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            dims = struct.unpack_from("<4I", data, pos)
            pos += 16
            size = int(np.prod(dims))
            if pos + 4 * size > len(data):
                raise CheckpointError(f"{path}: record {name!r} is truncated")
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record table") from exc
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def encode_meta(meta: dict) -> np.ndarray:
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def decode_meta(arr: np.ndarray) -> dict:
    return json.loads(arr.reshape(-1).astype(np.uint8).tobytes().decode("utf-8"))


@dataclass
class Checkpoint:
    tensors: dict
    momenta: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def save_checkpoint(path, model, momenta: dict | None = None, meta: dict | None = None) -> None:
    """Model parameters and buffers, optimizer momenta, and metadata."""
    records = {name: t.data for name, t in model.named_tensors()}
    for name, v in (momenta or {}).items():
        records[MOMENTUM_PREFIX + name] = v
    records[META_KEY] = encode_meta(meta or {})
    write_records(path, records)


def load_checkpoint(path) -> Checkpoint:
    records = read_records(path)
    meta = decode_meta(records.pop(META_KEY)) if META_KEY in records else {}
    momenta = {k[len(MOMENTUM_PREFIX):]: v for k, v in records.items() if k.startswith(MOMENTUM_PREFIX)}
    tensors = {k: v for k, v in records.items() if not k.startswith(MOMENTUM_PREFIX)}
    return Checkpoint(tensors=tensors, momenta=momenta, meta=meta)


def apply_to_model(model, ckpt: Checkpoint) -> None:
    """Copy stored tensors into ``model`` (every model tensor must be present)."""
    for name, t in model.named_tensors():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        arr = ckpt.tensors[name]
        if arr.size != t.size:
            raise CheckpointError(f"{name}: model shape {t.shape}, checkpoint holds {arr.size} values")
        t.data = arr.reshape(t.shape).astype(t.dtype)
    extra = set(ckpt.tensors) - {n for n, _ in model.named_tensors()}
    if extra:
        raise CheckpointError(f"checkpoint has unknown tensors: {sorted(extra)[:5]}")


def reshape_momenta(model, momenta: dict) -> dict:
    shapes = {n: p.shape for n, p in model.named_parameters()}
    out = {}
    for name, v in momenta.items():
        if name not in shapes:
            raise CheckpointError(f"momentum for unknown parameter {name!r}")
        out[name] = v.reshape(shapes[name])
    return out

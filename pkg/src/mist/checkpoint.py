"""Bit-exact checkpoint serialization.

Layout: magic ``MISC``, version u32, then four u64-length-prefixed
sections: config JSON, parameter table JSON (name, dtype, shape, byte
offset), raw parameter bytes, optimizer-state JSON + raw bytes. Raw
buffers round-trip bit-exactly; unknown versions are rejected outright.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import ParameterStore
from .tensor import Tensor

MAGIC = b"MISC"
VERSION = 1

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(ValueError):
    """Corrupted, truncated, or version-incompatible checkpoint."""


def _dtype_tag(dtype) -> str:
    for tag, dt in _DTYPE_TAGS.items():
        if np.dtype(dtype) == dt.newbyteorder("="):
            return tag
    raise CheckpointError(f"unsupported parameter dtype {dtype}")


@dataclass
class CheckpointBundle:
    """In-memory checkpoint: config, parameters, optimizer state."""

    config: dict
    params: dict  # name -> np.ndarray
    step_count: int = 0
    moments_m: dict = field(default_factory=dict)
    moments_v: dict = field(default_factory=dict)


def _pack_table(arrays: dict) -> tuple[list, bytes]:
    table = []
    blob = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        table.append({
            "name": name,
            "dtype": _dtype_tag(arr.dtype),
            "shape": list(arr.shape),
            "offset": len(blob),
        })
        blob += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return table, bytes(blob)


def _unpack_table(table: list, blob: bytes) -> dict:
    out = {}
    for entry in table:
        dt = _DTYPE_TAGS.get(entry["dtype"])
        if dt is None:
            raise CheckpointError(f"unknown dtype tag {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + count * dt.itemsize
        if end > len(blob):
            raise CheckpointError(f"parameter {entry['name']} overruns the blob")
        out[entry["name"]] = np.frombuffer(blob[start:end], dtype=dt).reshape(shape).astype(
            dt.newbyteorder("="), copy=True)
    return out


def save_checkpoint(path: Path, config: dict, store: ParameterStore):
    params = {name: t.data for name, t in store.items()}
    table, blob = _pack_table(params)
    optim_arrays = {}
    for name in store._m:
        optim_arrays[f"m.{name}"] = store._m[name]
        optim_arrays[f"v.{name}"] = store._v[name]
    optim_table, optim_blob = _pack_table(optim_arrays)
    optim_meta = {"step_count": store.step_count, "table": optim_table}

    sections = [
        json.dumps(config, sort_keys=True).encode(),
        json.dumps(table, sort_keys=True).encode(),
        blob,
        json.dumps(optim_meta, sort_keys=True).encode(),
        optim_blob,
    ]
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION))
        for sec in sections:
            fh.write(struct.pack("<Q", len(sec)))
            fh.write(sec)


def load_checkpoint(path: Path) -> CheckpointBundle:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    sections = []
    cursor = 8
    for _ in range(5):
        if cursor + 8 > len(raw):
            raise CheckpointError(f"{path}: truncated section header")
        (length,) = struct.unpack("<Q", raw[cursor : cursor + 8])
        cursor += 8
        if cursor + length > len(raw):
            raise CheckpointError(f"{path}: truncated section payload")
        sections.append(raw[cursor : cursor + length])
        cursor += length

    try:
        config = json.loads(sections[0])
        table = json.loads(sections[1])
        optim_meta = json.loads(sections[3])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt metadata: {exc}") from exc
    params = _unpack_table(table, sections[2])
    optim_arrays = _unpack_table(optim_meta["table"], sections[4])
    moments_m = {k[2:]: v for k, v in optim_arrays.items() if k.startswith("m.")}
    moments_v = {k[2:]: v for k, v in optim_arrays.items() if k.startswith("v.")}
    return CheckpointBundle(config=config, params=params,
                            step_count=optim_meta["step_count"],
                            moments_m=moments_m, moments_v=moments_v)


def load_into_store(bundle: CheckpointBundle, store: ParameterStore):
    """Overwrite a freshly built store with checkpointed values, bit-exact."""
    names = store.names()
    missing = [n for n in names if n not in bundle.params]
    extra = [n for n in bundle.params if n not in store]
    if missing or extra:
        raise CheckpointError(
            f"parameter names do not match the model: missing {missing}, unexpected {extra}")
    for name, tensor in store.items():
        arr = bundle.params[name]
        if arr.shape != tensor.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model {tensor.shape}")
        tensor.data = arr.astype(tensor.dtype, copy=True)
    store.step_count = bundle.step_count
    store._m = {k: v.copy() for k, v in bundle.moments_m.items()}
    store._v = {k: v.copy() for k, v in bundle.moments_v.items()}

"""Binary interchange format for latents and feature arrays.

Layout: 16-byte header (magic ``MIST``, version u32, rank u32, reserved
u32), then rank little-endian u32 extents, then the payload as raw
little-endian float32. Everything little-endian regardless of host.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MIST"
VERSION = 1


class TensorFormatError(ValueError):
    """Malformed or unsupported tensor file."""


def save_array(path: Path, array: np.ndarray):
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = MAGIC + struct.pack("<III", VERSION, arr.ndim, 0)
    extents = struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + extents + arr.tobytes())


def load_array(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise TensorFormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, rank, _ = struct.unpack("<III", raw[4:16])
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    offset = 16 + 4 * rank
    if len(raw) < offset:
        raise TensorFormatError(f"{path}: truncated extents")
    shape = struct.unpack(f"<{rank}I", raw[16:offset])
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = raw[offset:]
    if len(payload) != 4 * count:
        raise TensorFormatError(f"{path}: payload is {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()

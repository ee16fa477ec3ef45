"""External feature encoding and task-specific condition embedders.

The patch-statistics encoder stands in for a frozen vision backbone
behind a stable contract: fixed (S, D), deterministic, and local (patch
p only ever reads pixels of patch p). Task conditions (camera pose,
step position) become per-image embeddings added onto hidden states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .unet import VARIANT_EXTERNAL, VARIANT_PAIRED, linear, sinusoidal_embed

TASK_KINDS = ("camera", "step_index", "none")


@dataclass(frozen=True)
class CameraPose:
    """Rigid 4x4 extrinsic; rejected (never repaired) when non-rigid."""

    extrinsic: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.extrinsic, dtype=np.float64)
        if e.shape != (4, 4):
            raise ValueError(f"extrinsic must be 4x4, got {e.shape}")
        r = e[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-5:
            raise ValueError("rotation block is not orthonormal within 1e-5")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation block must have determinant +1")
        if not np.array_equal(e[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("last extrinsic row must be (0, 0, 0, 1)")
        object.__setattr__(self, "extrinsic", e)

    def flat12(self) -> np.ndarray:
        return self.extrinsic[:3, :].reshape(12)


def look_at_pose(azimuth: float, elevation: float = 0.0, radius: float = 2.0) -> CameraPose:
    """Camera on a ring around the origin, looking at the origin."""
    eye = radius * np.array([
        np.cos(elevation) * np.cos(azimuth),
        np.cos(elevation) * np.sin(azimuth),
        np.sin(elevation),
    ])
    forward = -eye / np.linalg.norm(eye)
    up_hint = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up_hint)
    if np.linalg.norm(right) < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    rot = np.stack([right, up, -forward])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ eye
    return CameraPose(ext)


@dataclass(frozen=True)
class TaskCondition:
    """One task payload per image: a pose, a step index, or nothing."""

    kind: str
    payload: object = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind == "camera" and not isinstance(self.payload, CameraPose):
            raise ValueError("camera condition needs a CameraPose payload")
        if self.kind == "step_index" and (not isinstance(self.payload, (int, np.integer)) or self.payload < 0):
            raise ValueError("step_index condition needs a non-negative integer payload")
        if self.kind == "none" and self.payload is not None:
            raise ValueError("none condition carries no payload")


@dataclass(frozen=True)
class StubEncoder:
    """Deterministic patch-statistics image encoder.

    Splits the image into a sqrt(S) x sqrt(S) grid and maps 8 per-patch
    statistics (channel means and variances, horizontal and vertical
    gradient energy) through a fixed version-seeded linear layer to D
    dims.
    """

    n_tokens: int = 16
    dim: int = 32
    version: int = 1

    encoder_id = "patch-stats"
    N_STATS = 8

    def __post_init__(self):
        grid = int(round(np.sqrt(self.n_tokens)))
        if grid * grid != self.n_tokens:
            raise ValueError(f"n_tokens must be a square grid count, got {self.n_tokens}")

    @property
    def grid(self) -> int:
        return int(round(np.sqrt(self.n_tokens)))

    def _mixing(self) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.version, spawn_key=(ord("e"),)))
        return rng.standard_normal((self.N_STATS, self.dim)).astype(np.float32)

    def encode(self, image: np.ndarray) -> np.ndarray:
        """Image [H, W, 3] (uint8 or float in [0, 1]) -> features [S, D]."""
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected [H, W, 3] raster, got {img.shape}")
        if img.dtype == np.uint8:
            img = img.astype(np.float32) / 255.0
        else:
            img = img.astype(np.float32)
        g = self.grid
        h, w = img.shape[:2]
        if h % g or w % g:
            raise ValueError(f"image {h}x{w} does not split into a {g}x{g} patch grid")
        ph, pw = h // g, w // g
        patches = img.reshape(g, ph, g, pw, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, ph, pw, 3)
        stats = np.zeros((g * g, self.N_STATS), dtype=np.float32)
        stats[:, 0:3] = patches.mean(axis=(1, 2))
        stats[:, 3:6] = patches.var(axis=(1, 2))
        if pw > 1:
            stats[:, 6] = np.abs(np.diff(patches, axis=2)).mean(axis=(1, 2, 3))
        if ph > 1:
            stats[:, 7] = np.abs(np.diff(patches, axis=1)).mean(axis=(1, 2, 3))
        return stats @ self._mixing()

    def encode_set(self, images) -> np.ndarray:
        """Stack per-image features into [N, S, D]."""
        return np.stack([self.encode(img) for img in images])


@dataclass
class EmbedderParams:
    """Two-layer MLP weights for a condition embedder."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, store, prefix, in_dim, hidden, out_dim, rng):
        return cls(
            w1=store.create(f"{prefix}.w1", (in_dim, hidden), rng),
            b1=store.create(f"{prefix}.b1", (hidden,), init="zeros"),
            w2=store.create(f"{prefix}.w2", (hidden, out_dim), rng),
            b2=store.create(f"{prefix}.b2", (out_dim,), init="zeros"),
        )

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]


def _mlp(x: Tensor, params: EmbedderParams) -> Tensor:
    return linear(T.silu(linear(x, params.w1, params.b1)), params.w2, params.b2)


def camera_embed(pose: CameraPose, params: EmbedderParams) -> Tensor:
    """Flattened 3x4 extrinsic through the MLP; output [out_dim]."""
    if params.in_dim != 12:
        raise ShapeError(f"camera embedder expects 12 inputs, got {params.in_dim}")
    feats = Tensor(pose.flat12()[None, :].astype(np.float32))
    return T.reshape(_mlp(feats, params), (params.out_dim,))


def position_embed(index: int, params: EmbedderParams) -> Tensor:
    """Sinusoidal encoding of an absolute step index through the MLP."""
    if index < 0:
        raise ValueError(f"step index must be >= 0, got {index}")
    feats = Tensor(sinusoidal_embed(float(index), params.in_dim)[None, :].astype(np.float32))
    return T.reshape(_mlp(feats, params), (params.out_dim,))


def embed_conditions(conditions, params: EmbedderParams) -> Tensor:
    """Per-image embeddings [BZ, N, out_dim] for a nested condition list.

    ``conditions[b][i]`` is the TaskCondition for image i of batch entry
    b; kind "none" rows embed to zero.
    """
    bz = len(conditions)
    n = len(conditions[0])
    rows = []
    for batch in conditions:
        if len(batch) != n:
            raise ValueError("ragged condition batch")
        for cond in batch:
            if cond.kind == "camera":
                rows.append(cond.payload.flat12().astype(np.float32))
            elif cond.kind == "step_index":
                rows.append(sinusoidal_embed(float(cond.payload), params.in_dim).astype(np.float32))
            else:
                rows.append(None)
    live = [r for r in rows if r is not None]
    out_rows = np.zeros((bz * n, params.out_dim), dtype=np.float32)
    if not live:
        return Tensor(out_rows.reshape(bz, n, params.out_dim))
    embedded = _mlp(Tensor(np.stack(live)), params)
    # scatter live rows back among the zero (kind="none") rows
    live_idx = [i for i, r in enumerate(rows) if r is not None]
    if len(live_idx) == len(rows):
        return T.reshape(embedded, (bz, n, params.out_dim))
    pieces = []
    cursor = 0
    zero_row = Tensor(np.zeros((1, params.out_dim), dtype=np.float32))
    for i in range(len(rows)):
        if rows[i] is None:
            pieces.append(zero_row)
        else:
            pieces.append(T.narrow(embedded, 0, cursor, 1))
            cursor += 1
    return T.reshape(T.concat(pieces, axis=0), (bz, n, params.out_dim))


def inject_condition(hidden, embeddings, variant: str) -> Tensor:
    """Broadcast-add one embedding per image onto the hidden states.

    Paired variant: hidden [BZ, 2, N, C, H, W] gets embeddings [BZ, N, C]
    over both slices and all positions. External variant: features
    [BZ, N, S, D] get embeddings [BZ, N, D] over all tokens.
    """
    hidden = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
    emb = embeddings if isinstance(embeddings, Tensor) else Tensor(np.asarray(embeddings, dtype=hidden.dtype))
    if variant == VARIANT_PAIRED:
        if hidden.ndim != 6:
            raise ShapeError(f"paired hidden must be [BZ, 2, N, C, H, W], got {hidden.shape}")
        bz, _, n, c = hidden.shape[:4]
        if emb.shape != (bz, n, c):
            raise ShapeError(f"embeddings must be {(bz, n, c)}, got {emb.shape}")
        return T.add(hidden, T.reshape(emb, (bz, 1, n, c, 1, 1)))
    if variant == VARIANT_EXTERNAL:
        if hidden.ndim != 4:
            raise ShapeError(f"feature hidden must be [BZ, N, S, D], got {hidden.shape}")
        bz, n, _, d = hidden.shape
        if emb.shape != (bz, n, d):
            raise ShapeError(f"embeddings must be {(bz, n, d)}, got {emb.shape}")
        return T.add(hidden, T.reshape(emb, (bz, n, 1, d)))
    raise ValueError(f"unknown variant {variant!r}")


def zero_condition(cond):
    """Canonical zeroed form of a condition; idempotent.

    Arrays and tensors zero in place of their values; a TaskCondition
    collapses to the kind-"none" sentinel whose embedding is zero.
    """
    if isinstance(cond, Tensor):
        return Tensor(np.zeros_like(cond.data))
    if isinstance(cond, np.ndarray):
        return np.zeros_like(cond)
    if isinstance(cond, TaskCondition):
        return TaskCondition("none")
    raise TypeError(f"cannot zero a {type(cond).__name__}")

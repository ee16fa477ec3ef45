"""Multi-head attention and its image-set layout variants.

Three mechanisms drive the image-set module: blockwise self-attention
inside each noisy block, global causal cross-attention to every patch
of earlier clean blocks, and set-axis causal cross-attention to the
spatially matching patch of earlier blocks. The external-feature
variant attends encoder tokens of earlier images instead of clean
patches.

All ops here are bare attention (no residual or normalization); the
denoiser wraps them with pre-norm and residual adds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .masks import (
    AttentionMask,
    BlockLayout,
    build_external_causal_mask,
    build_global_causal_mask,
    build_set_axis_causal_mask,
)
from .optim import ParameterStore
from .tensor import ShapeError, Tensor, apply_op, matmul, reshape, transpose


@dataclass
class MultiHeadParams:
    """Projection weights for one multi-head attention op.

    All four projections are dim x dim; head dim is dim / n_heads.
    """

    n_heads: int
    dim: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ShapeError(f"model dim {self.dim} not divisible by {self.n_heads} heads")
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name)
            if w.shape != (self.dim, self.dim):
                raise ShapeError(f"{name} must be {(self.dim, self.dim)}, got {w.shape}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @classmethod
    def create(cls, store: ParameterStore, prefix: str, dim: int, n_heads: int,
               rng: np.random.Generator) -> "MultiHeadParams":
        return cls(
            n_heads=n_heads,
            dim=dim,
            wq=store.create(f"{prefix}.wq", (dim, dim), rng),
            wk=store.create(f"{prefix}.wk", (dim, dim), rng),
            wv=store.create(f"{prefix}.wv", (dim, dim), rng),
            wo=store.create(f"{prefix}.wo", (dim, dim), rng),
        )

    @classmethod
    def identity(cls, dim: int, n_heads: int = 1, dtype=np.float32) -> "MultiHeadParams":
        eye = lambda: Tensor(np.eye(dim, dtype=dtype))
        return cls(n_heads=n_heads, dim=dim, wq=eye(), wk=eye(), wv=eye(), wo=eye())


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray) -> Tensor:
    """softmax(q k^T / sqrt(d)) v restricted to allowed keys.

    Differentiable primitive backed by the selected kernel backend;
    rows with no allowed key come back as zero vectors.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ShapeError(f"attention operand shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    if allowed.shape != (q.shape[-2], k.shape[-2]):
        raise ShapeError(
            f"mask shape {allowed.shape} does not match query/key lengths ({q.shape[-2]}, {k.shape[-2]})")
    scale = 1.0 / math.sqrt(q.shape[-1])
    out = kernels.attention_forward(q.data, k.data, v.data, allowed, scale)
    qd, kd, vd = q.data, k.data, v.data

    def backward(g):
        return kernels.attention_backward(qd, kd, vd, allowed, scale, g)

    return apply_op(out, (q, k, v), backward)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, c = x.shape
    x = reshape(x, (b, l, n_heads, c // n_heads))
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (b * n_heads, l, c // n_heads))


def _merge_heads(x: Tensor, batch: int, n_heads: int) -> Tensor:
    _, l, d = x.shape
    x = reshape(x, (batch, n_heads, l, d))
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (batch, l, n_heads * d))


def multi_head_attention(zq: Tensor, zk: Tensor, zv: Tensor, mask: AttentionMask,
                         params: MultiHeadParams) -> Tensor:
    """Project, attend per head under ``mask``, concatenate, project out.

    zq: [B, Lq, C]; zk, zv: [B, Lk, C]. The mask is shared across batch
    and heads.
    """
    if zq.shape[-1] != params.dim or zk.shape[-1] != params.dim or zv.shape[-1] != params.dim:
        raise ShapeError(f"inputs must end in model dim {params.dim}, got {zq.shape}/{zk.shape}/{zv.shape}")
    if mask.rows != zq.shape[1] or mask.cols != zk.shape[1]:
        raise ShapeError(f"mask {mask.allowed.shape} does not fit sequences ({zq.shape[1]}, {zk.shape[1]})")
    b = zq.shape[0]
    q = _split_heads(matmul(zq, params.wq), params.n_heads)
    k = _split_heads(matmul(zk, params.wk), params.n_heads)
    v = _split_heads(matmul(zv, params.wv), params.n_heads)
    out = scaled_dot_attention(q, k, v, mask.allowed)
    return matmul(_merge_heads(out, b, params.n_heads), params.wo)


def blockwise_self_attention(z_n: Tensor, layout: BlockLayout, params: MultiHeadParams) -> Tensor:
    """Self-attention of noisy patches within their own block.

    z_n: [BZ, N, H, W, C]. Realized as K independent (B*H*W)^2 attentions
    by folding the block axis into the batch.
    """
    bz, n, h, w, c = _check_set_shape(z_n, layout)
    k, b = layout.n_blocks, layout.block_size
    flat = reshape(z_n, (bz * k, b * h * w, c))
    full = AttentionMask(np.ones((b * h * w, b * h * w), dtype=bool))
    out = multi_head_attention(flat, flat, flat, full, params)
    return reshape(out, (bz, n, h, w, c))


def global_cross_attention(z_n: Tensor, z_c: Tensor, layout: BlockLayout,
                           params: MultiHeadParams):
    """Noisy queries attend all clean patches of earlier blocks.

    Returns (z_c, updated z_n); the clean latent passes through untouched
    and block 0 rows come back as zeros.
    """
    bz, n, h, w, c = _check_set_shape(z_n, layout)
    if z_c.shape != z_n.shape:
        raise ShapeError(f"clean/noisy shapes differ: {z_c.shape} vs {z_n.shape}")
    mask = build_global_causal_mask(layout, h, w)
    qf = reshape(z_n, (bz, n * h * w, c))
    kf = reshape(z_c, (bz, n * h * w, c))
    out = multi_head_attention(qf, kf, kf, mask, params)
    return z_c, reshape(out, (bz, n, h, w, c))


def block_set_cross_attention(z_n: Tensor, z_c: Tensor, layout: BlockLayout,
                              params: MultiHeadParams) -> Tensor:
    """Cross-attention along the image-set axis only.

    Both latents fold to (BZ*H*W, N, C) so each spatial location runs an
    independent N x N causal attention to the same location in earlier
    blocks.
    """
    bz, n, h, w, c = _check_set_shape(z_n, layout)
    if z_c.shape != z_n.shape:
        raise ShapeError(f"clean/noisy shapes differ: {z_c.shape} vs {z_n.shape}")
    mask = build_set_axis_causal_mask(layout)
    order = (0, 2, 3, 1, 4)  # [BZ, N, H, W, C] -> [BZ, H, W, N, C]
    qf = reshape(transpose(z_n, order), (bz * h * w, n, c))
    kf = reshape(transpose(z_c, order), (bz * h * w, n, c))
    out = multi_head_attention(qf, kf, kf, mask, params)
    out = transpose(reshape(out, (bz, h, w, n, c)), (0, 3, 1, 2, 4))
    return out


def external_cross_attention(z_t: Tensor, v: Tensor, params: MultiHeadParams,
                             key_proj: Tensor) -> Tensor:
    """Noisy patches attend projected feature tokens of earlier images.

    z_t: [BZ, N, H, W, C]; v: [BZ, N, S, D]; key_proj: [D, C]. Uses the
    block-size-1 causal pattern (image i sees tokens of images < i).
    """
    if z_t.ndim != 5 or v.ndim != 4:
        raise ShapeError(f"expected latent [BZ,N,H,W,C] and features [BZ,N,S,D], got {z_t.shape} and {v.shape}")
    bz, n, h, w, c = z_t.shape
    if v.shape[0] != bz or v.shape[1] != n:
        raise ShapeError(f"feature set {v.shape} does not match latent set {z_t.shape}")
    s, d = v.shape[2], v.shape[3]
    if key_proj.shape != (d, c):
        raise ShapeError(f"key projection must be {(d, c)}, got {key_proj.shape}")
    mask = build_external_causal_mask(n, s, h, w)
    qf = reshape(z_t, (bz, n * h * w, c))
    kf = matmul(reshape(v, (bz, n * s, d)), key_proj)
    out = multi_head_attention(qf, kf, kf, mask, params)
    return reshape(out, (bz, n, h, w, c))


def _check_set_shape(z: Tensor, layout: BlockLayout):
    if z.ndim != 5:
        raise ShapeError(f"expected [BZ, N, H, W, C], got {z.shape}")
    bz, n, h, w, c = z.shape
    if n != layout.n_images:
        raise ShapeError(f"tensor has {n} images but layout expects {layout.n_images}")
    return bz, n, h, w, c

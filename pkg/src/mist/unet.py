"""Tiny time-conditioned latent denoiser with image-set attention.

The trunk is a two-level-by-default U-Net (residual conv blocks, group
norm, 2x pooling) whose text cross-attention slot is replaced by the
image-set attention stage. The cross-attention flavor at each level is
picked from the level's spatial extent: global below the threshold,
set-axis above it; the external-feature variant attends encoder tokens
at every stage instead.

In the paired variant the clean latents travel through the same conv
trunk as the noisy ones (shared weights, doubled batch) so clean
features exist at every resolution purely as attention keys; predictions
are read from the noisy slice only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (
    MultiHeadParams,
    block_set_cross_attention,
    blockwise_self_attention,
    external_cross_attention,
    global_cross_attention,
)
from .masks import BlockLayout
from .optim import ParameterStore
from .tensor import ShapeError, Tensor

VARIANT_PAIRED = "mis-sa"
VARIANT_EXTERNAL = "mis-dino"
VARIANTS = (VARIANT_PAIRED, VARIANT_EXTERNAL)

ATTN_GLOBAL = "global"
ATTN_BLOCK_SET = "block_set"


def select_attention_kind(spatial_extent: int, threshold: float) -> str:
    """Global attention at small extents, set-axis at large ones."""
    if spatial_extent <= 0:
        raise ValueError(f"spatial extent must be positive, got {spatial_extent}")
    return ATTN_GLOBAL if spatial_extent <= threshold else ATTN_BLOCK_SET


def sinusoidal_embed(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos features at geometric frequencies over [1, 1e4].

    ``t`` may be a scalar or any integer/float array; output appends a
    trailing axis of length ``dim``.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    t = np.asarray(t, dtype=np.float64)
    exponents = np.arange(half) / max(half - 1, 1)
    angles = t[..., None] / (10_000.0 ** exponents)
    out = np.empty(t.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


@dataclass(frozen=True)
class UNetConfig:
    """Architecture and layout hyperparameters for the denoiser."""

    variant: str = VARIANT_PAIRED
    n_images: int = 5
    block_size: int = 1
    latent_channels: int = 48
    latent_h: int = 8
    latent_w: int = 8
    base_channels: int = 32
    channel_mults: tuple = (1, 2)
    time_embed_dim: int = 64
    n_heads: int = 4
    norm_groups: int = 8
    attn_threshold: float | None = None
    feature_tokens: int = 16
    feature_dim: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == VARIANT_EXTERNAL and self.block_size != 1:
            raise ValueError("the external-feature variant generates per image; block_size must be 1")
        BlockLayout(self.n_images, self.block_size)  # validates divisibility
        if len(self.channel_mults) < 2:
            raise ValueError("need at least 2 resolution levels")
        down = 2 ** (self.levels - 1)
        if self.latent_h % down or self.latent_w % down:
            raise ValueError(
                f"latent {self.latent_h}x{self.latent_w} not divisible by 2^{self.levels - 1}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        for c in self.level_channels:
            if c % self.norm_groups:
                raise ValueError(f"level width {c} not divisible by {self.norm_groups} norm groups")
            if c % self.n_heads:
                raise ValueError(f"level width {c} not divisible by {self.n_heads} heads")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def level_channels(self) -> tuple:
        return tuple(self.base_channels * m for m in self.channel_mults)

    @property
    def layout(self) -> BlockLayout:
        return BlockLayout(self.n_images, self.block_size)

    def level_extent(self, level: int) -> int:
        return max(self.latent_h, self.latent_w) >> level

    def effective_threshold(self) -> float:
        # default: only the smallest extent runs global attention
        if self.attn_threshold is not None:
            return self.attn_threshold
        return float(self.level_extent(self.levels - 1))

    def attention_kind(self, level: int) -> str:
        return select_attention_kind(self.level_extent(level), self.effective_threshold())

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "n_images": self.n_images,
            "block_size": self.block_size,
            "latent_channels": self.latent_channels,
            "latent_h": self.latent_h,
            "latent_w": self.latent_w,
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "time_embed_dim": self.time_embed_dim,
            "n_heads": self.n_heads,
            "norm_groups": self.norm_groups,
            "attn_threshold": self.attn_threshold,
            "feature_tokens": self.feature_tokens,
            "feature_dim": self.feature_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize [M, C, H, W] per image over each channel group."""
    m, c, h, w = x.shape
    xg = T.reshape(x, (m, groups, (c // groups) * h * w))
    mu = T.mean(xg, axis=2, keepdims=True)
    xc = T.sub(xg, mu)
    var = T.mean(T.mul(xc, xc), axis=2, keepdims=True)
    norm = T.reshape(T.div(xc, T.sqrt(T.add(var, eps))), (m, c, h, w))
    return T.add(T.mul(norm, T.reshape(gamma, (1, c, 1, 1))), T.reshape(beta, (1, c, 1, 1)))


def layer_norm_lastdim(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-position normalization over the trailing channel axis."""
    mu = T.mean(x, axis=-1, keepdims=True)
    xc = T.sub(x, mu)
    var = T.mean(T.mul(xc, xc), axis=-1, keepdims=True)
    return T.add(T.mul(T.div(xc, T.sqrt(T.add(var, eps))), gamma), beta)


class _ResBlock:
    def __init__(self, store, prefix, cin, cout, temb_dim, groups, rng):
        self.groups = groups
        self.gn1_g = store.create(f"{prefix}.gn1.g", (cin,), init="ones")
        self.gn1_b = store.create(f"{prefix}.gn1.b", (cin,), init="zeros")
        self.conv1_w = store.create(f"{prefix}.conv1.w", (cout, cin, 3, 3), rng)
        self.conv1_b = store.create(f"{prefix}.conv1.b", (cout,), init="zeros")
        self.temb_w = store.create(f"{prefix}.temb.w", (temb_dim, cout), rng)
        self.temb_b = store.create(f"{prefix}.temb.b", (cout,), init="zeros")
        self.gn2_g = store.create(f"{prefix}.gn2.g", (cout,), init="ones")
        self.gn2_b = store.create(f"{prefix}.gn2.b", (cout,), init="zeros")
        self.conv2_w = store.create(f"{prefix}.conv2.w", (cout, cout, 3, 3), rng)
        self.conv2_b = store.create(f"{prefix}.conv2.b", (cout,), init="zeros")
        if cin != cout:
            self.skip_w = store.create(f"{prefix}.skip.w", (cout, cin, 1, 1), rng)
            self.skip_b = store.create(f"{prefix}.skip.b", (cout,), init="zeros")
        else:
            self.skip_w = None
            self.skip_b = None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = T.conv2d(T.silu(group_norm(x, self.gn1_g, self.gn1_b, self.groups)),
                     self.conv1_w, self.conv1_b, padding=1)
        shift = linear(T.silu(temb), self.temb_w, self.temb_b)
        h = T.add(h, T.reshape(shift, (shift.shape[0], shift.shape[1], 1, 1)))
        h = T.conv2d(T.silu(group_norm(h, self.gn2_g, self.gn2_b, self.groups)),
                     self.conv2_w, self.conv2_b, padding=1)
        skip = x if self.skip_w is None else T.conv2d(x, self.skip_w, self.skip_b)
        return T.add(h, skip)


class _AttentionStage:
    """Pre-norm residual image-set attention at one resolution level."""

    def __init__(self, store, prefix, config: UNetConfig, width, kind, rng):
        self.kind = kind
        self.variant = config.variant
        self.block_size = config.block_size
        self.ln_self_g = store.create(f"{prefix}.ln_self.g", (width,), init="ones")
        self.ln_self_b = store.create(f"{prefix}.ln_self.b", (width,), init="zeros")
        self.self_attn = MultiHeadParams.create(store, f"{prefix}.self", width, config.n_heads, rng)
        self.ln_q_g = store.create(f"{prefix}.ln_q.g", (width,), init="ones")
        self.ln_q_b = store.create(f"{prefix}.ln_q.b", (width,), init="zeros")
        self.cross_attn = MultiHeadParams.create(store, f"{prefix}.cross", width, config.n_heads, rng)
        if config.variant == VARIANT_EXTERNAL:
            self.key_proj = store.create(f"{prefix}.key_proj", (config.feature_dim, width), rng)
        else:
            self.key_proj = None
            self.ln_kv_g = store.create(f"{prefix}.ln_kv.g", (width,), init="ones")
            self.ln_kv_b = store.create(f"{prefix}.ln_kv.b", (width,), init="zeros")

    def __call__(self, noisy: Tensor, clean: Tensor | None, features: Tensor | None) -> Tensor:
        # layout follows the actual set size so inference can vary N
        layout = BlockLayout(noisy.shape[1], self.block_size)
        # blockwise self-attention over the noisy stream only
        normed = layer_norm_lastdim(noisy, self.ln_self_g, self.ln_self_b)
        noisy = T.add(noisy, blockwise_self_attention(normed, layout, self.self_attn))

        q = layer_norm_lastdim(noisy, self.ln_q_g, self.ln_q_b)
        if self.variant == VARIANT_EXTERNAL:
            upd = external_cross_attention(q, features, self.cross_attn, self.key_proj)
        else:
            kv = layer_norm_lastdim(clean, self.ln_kv_g, self.ln_kv_b)
            if self.kind == ATTN_GLOBAL:
                _, upd = global_cross_attention(q, kv, layout, self.cross_attn)
            else:
                upd = block_set_cross_attention(q, kv, layout, self.cross_attn)
        # empty causal rows add exact zeros, so block 0 degrades to identity
        return T.add(noisy, upd)


class UNet:
    """Noise predictor; build with ``build_unet`` or from a checkpoint."""

    def __init__(self, config: UNetConfig, store: ParameterStore, rng: np.random.Generator):
        self.config = config
        self.store = store
        ch = config.level_channels
        td = config.time_embed_dim
        self.time_w1 = store.create("time.w1", (td, td), rng)
        self.time_b1 = store.create("time.b1", (td,), init="zeros")
        self.time_w2 = store.create("time.w2", (td, td), rng)
        self.time_b2 = store.create("time.b2", (td,), init="zeros")
        self.conv_in_w = store.create("conv_in.w", (ch[0], config.latent_channels, 3, 3), rng)
        self.conv_in_b = store.create("conv_in.b", (ch[0],), init="zeros")
        self.down_res = []
        self.down_attn = []
        for i in range(config.levels):
            cin = ch[max(i - 1, 0)]
            self.down_res.append(_ResBlock(store, f"down{i}.res", cin, ch[i], td,
                                           config.norm_groups, rng))
            self.down_attn.append(_AttentionStage(store, f"down{i}.attn", config, ch[i],
                                                  config.attention_kind(i), rng))
        self.up_res = []
        for i in reversed(range(config.levels - 1)):
            self.up_res.append(_ResBlock(store, f"up{i}.res", ch[i + 1] + ch[i], ch[i], td,
                                         config.norm_groups, rng))
        self.out_gn_g = store.create("out.gn.g", (ch[0],), init="ones")
        self.out_gn_b = store.create("out.gn.b", (ch[0],), init="zeros")
        self.out_conv_w = store.create("out.conv.w", (config.latent_channels, ch[0], 3, 3), rng)
        self.out_conv_b = store.create("out.conv.b", (config.latent_channels,), init="zeros")

    def forward(self, latents: Tensor, t_per_image, features: Tensor | None = None,
                skip_attention: bool = False) -> Tensor:
        """Predict the injected noise for every noisy latent in the set.

        Paired variant: ``latents`` is [BZ, 2, N, C, H, W] with the clean
        slice first. External variant: ``latents`` is [BZ, N, C, H, W]
        and ``features`` is [BZ, N, S, D]. ``t_per_image`` broadcasts to
        [BZ, N]. ``skip_attention`` is a conv-only ablation hook.
        """
        cfg = self.config
        paired = cfg.variant == VARIANT_PAIRED
        expected = 6 if paired else 5
        if latents.ndim != expected:
            raise ShapeError(f"{cfg.variant} expects rank-{expected} latents, got {latents.shape}")
        bz = latents.shape[0]
        # the set size may differ from the training default as long as it
        # still splits into whole blocks (inference grows the context)
        n = latents.shape[2] if paired else latents.shape[1]
        if n < 1 or n % cfg.block_size:
            raise ShapeError(f"set size {n} does not split into blocks of {cfg.block_size}")
        if paired and latents.shape[1] != 2:
            raise ShapeError(f"expected [BZ, 2, N, C, H, W], got {latents.shape}")
        if not paired:
            if features is None:
                raise ShapeError("the external-feature variant needs features")
            if features.shape != (bz, n, cfg.feature_tokens, cfg.feature_dim):
                raise ShapeError(
                    f"features must be {(bz, n, cfg.feature_tokens, cfg.feature_dim)}, got {features.shape}")
        if latents.shape[-3:] != (cfg.latent_channels, cfg.latent_h, cfg.latent_w):
            raise ShapeError(
                f"latent dims {latents.shape[-3:]} do not match config "
                f"({cfg.latent_channels}, {cfg.latent_h}, {cfg.latent_w})")

        t = np.broadcast_to(np.asarray(t_per_image, dtype=np.float64), (bz, n))
        if paired:
            # clean slots are conditioned at t=0
            t_full = np.concatenate([np.zeros_like(t), t], axis=1).reshape(-1)
            streams = 2 * n
        else:
            t_full = t.reshape(-1)
            streams = n
        temb = Tensor(sinusoidal_embed(t_full, cfg.time_embed_dim).astype(latents.dtype))
        temb = linear(T.silu(linear(temb, self.time_w1, self.time_b1)), self.time_w2, self.time_b2)

        x = T.reshape(latents, (bz * streams, cfg.latent_channels, cfg.latent_h, cfg.latent_w))
        h = T.conv2d(x, self.conv_in_w, self.conv_in_b, padding=1)
        skips = []
        for i in range(cfg.levels):
            h = self.down_res[i](h, temb)
            if not skip_attention:
                h = self._run_attention(h, i, bz, n, features)
            if i < cfg.levels - 1:
                skips.append(h)
                h = T.avg_pool2(h)
        for step, i in enumerate(reversed(range(cfg.levels - 1))):
            h = T.upsample_nearest2(h)
            h = T.concat([h, skips[i]], axis=1)
            h = self.up_res[step](h, temb)
        h = T.conv2d(T.silu(group_norm(h, self.out_gn_g, self.out_gn_b, cfg.norm_groups)),
                     self.out_conv_w, self.out_conv_b, padding=1)

        hh, ww = cfg.latent_h, cfg.latent_w
        if paired:
            h = T.reshape(h, (bz, 2, n, cfg.latent_channels, hh, ww))
            h = T.reshape(T.narrow(h, 1, 1, 1), (bz, n, cfg.latent_channels, hh, ww))
        else:
            h = T.reshape(h, (bz, n, cfg.latent_channels, hh, ww))
        return h

    def _run_attention(self, h: Tensor, level: int, bz: int, n: int, features: Tensor | None) -> Tensor:
        cfg = self.config
        m, c, hh, ww = h.shape
        paired = cfg.variant == VARIANT_PAIRED
        streams = 2 * n if paired else n
        sets = T.reshape(h, (bz, streams, c, hh, ww))
        sets = T.transpose(sets, (0, 1, 3, 4, 2))  # channels last for attention
        if paired:
            clean = T.narrow(sets, 1, 0, n)
            noisy = T.narrow(sets, 1, n, n)
            noisy = self.down_attn[level](noisy, clean, None)
            sets = T.concat([clean, noisy], axis=1)
        else:
            sets = self.down_attn[level](sets, None, features)
        sets = T.transpose(sets, (0, 1, 4, 2, 3))
        return T.reshape(sets, (m, c, hh, ww))


def build_unet(config: UNetConfig, seed: int, dtype=np.float32) -> tuple[UNet, ParameterStore]:
    """Deterministic construction: (config, seed) fixes every parameter."""
    store = ParameterStore(dtype)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(ord("w"),)))
    return UNet(config, store, rng), store

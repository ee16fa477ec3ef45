"""Run configuration: defaults, flat config files, model assembly.

Config files are flat ``key = value`` text; CLI flags override file
values. The effective config is serialized into checkpoints and echoed
into output directories so every artifact carries its provenance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .conditioning import EmbedderParams
from .diffusion import GuidanceConfig, NoiseSchedule, make_linear_schedule
from .optim import ParameterStore
from .unet import VARIANT_PAIRED, VARIANTS, UNet, UNetConfig, build_unet

TASK_EMBED_HIDDEN = 32
STEP_EMBED_IN_DIM = 16


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass(frozen=True)
class RunConfig:
    """Everything a training or sampling run needs, in one place."""

    variant: str = VARIANT_PAIRED
    seed: int = 0
    # data geometry
    resolution: int = 32
    patch: int = 4
    n_images: int = 5
    block_size: int = 1
    # denoiser
    base_channels: int = 32
    channel_mults: tuple = (1, 2)
    time_embed_dim: int = 64
    n_heads: int = 4
    norm_groups: int = 8
    attn_threshold: float | None = None
    feature_tokens: int = 16
    feature_dim: int = 32
    task_condition: str = "none"  # none | camera | step_index
    # schedule
    t_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    # training
    train_steps: int = 500
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout_p: float = 0.1
    checkpoint_every: int = 250
    per_image_t: bool = False
    # sampling
    sampler_steps: int = 50
    guidance_scale: float = 7.5
    task_guidance_scale: float | None = None
    context_window: int = 4
    eta: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.task_condition not in ("none", "camera", "step_index"):
            raise ConfigError(f"unknown task_condition {self.task_condition!r}")
        if self.resolution % self.patch:
            raise ConfigError(f"resolution {self.resolution} not divisible by patch {self.patch}")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1], got {self.dropout_p}")
        try:
            self.unet_config()
            self.guidance()
            make_linear_schedule(self.t_steps, self.beta_start, self.beta_end)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def latent_side(self) -> int:
        return self.resolution // self.patch

    @property
    def latent_channels(self) -> int:
        return 3 * self.patch * self.patch

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            variant=self.variant,
            n_images=self.n_images,
            block_size=self.block_size,
            latent_channels=self.latent_channels,
            latent_h=self.latent_side,
            latent_w=self.latent_side,
            base_channels=self.base_channels,
            channel_mults=tuple(self.channel_mults),
            time_embed_dim=self.time_embed_dim,
            n_heads=self.n_heads,
            norm_groups=self.norm_groups,
            attn_threshold=self.attn_threshold,
            feature_tokens=self.feature_tokens,
            feature_dim=self.feature_dim,
        )

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.t_steps, self.beta_start, self.beta_end)

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(scale=self.guidance_scale, task_scale=self.task_guidance_scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        if "channel_mults" in d:
            d["channel_mults"] = tuple(d["channel_mults"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, **kwargs) -> "RunConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        if "channel_mults" in kwargs:
            kwargs["channel_mults"] = tuple(kwargs["channel_mults"])
        try:
            return replace(self, **kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    if "," in raw:
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        try:
            return [json.loads(p) for p in parts]
        except json.JSONDecodeError:
            return parts
    if raw.lower() in ("none", "null"):
        return None
    return raw


def parse_flat_config(text: str) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        out[key.strip()] = _parse_value(raw)
    return out


def format_flat_config(d: dict) -> str:
    lines = []
    for key in sorted(d):
        value = d[key]
        if isinstance(value, (list, tuple)):
            value = json.dumps(list(value))
        elif value is None:
            value = "none"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def load_config_file(path: Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return RunConfig.from_dict(parse_flat_config(text))


def build_model(config: RunConfig) -> tuple[UNet, ParameterStore]:
    """Deterministically assemble the denoiser (and task embedder, if any).

    The embedder's parameters live in the same store as the denoiser's so
    checkpoints carry the whole trainable state.
    """
    unet, store = build_unet(config.unet_config(), seed=config.seed)
    if config.task_condition != "none":
        in_dim = 12 if config.task_condition == "camera" else STEP_EMBED_IN_DIM
        out_dim = config.latent_channels if config.variant == VARIANT_PAIRED else config.feature_dim
        rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(ord("t"),)))
        unet.task_embedder = EmbedderParams.create(store, "task_embed", in_dim,
                                                   TASK_EMBED_HIDDEN, out_dim, rng)
    else:
        unet.task_embedder = None
    return unet, store

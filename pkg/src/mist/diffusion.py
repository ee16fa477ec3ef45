"""Forward noising, training objective, DDIM sampling, guidance.

The schedule keeps float64 coefficients; samples and losses follow the
dtype of the latents they touch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .unet import VARIANT_EXTERNAL, VARIANT_PAIRED


class NumericalError(RuntimeError):
    """Non-finite values where the math guarantees finite ones."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-diffusion coefficients over T timesteps."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("betas must be a non-empty 1-d array")
        if (b <= 0).any() or (b >= 1).any():
            raise ValueError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alphas", 1.0 - b)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - b))

    @property
    def t_steps(self) -> int:
        return self.betas.size


def make_linear_schedule(t_steps: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Betas linearly interpolated inclusive of both endpoints."""
    if t_steps < 1:
        raise ValueError(f"need at least one step, got {t_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if t_steps == 1:
        return NoiseSchedule(np.array([beta_start]))
    return NoiseSchedule(np.linspace(beta_start, beta_end, t_steps))


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Noise clean latents to timestep t: sqrt(ab)*z0 + sqrt(1-ab)*eps.

    ``t`` is a scalar or an array indexing per image along axis 1 of a
    [BZ, N, ...] batch.
    """
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latents {z0.shape}")
    t_arr = np.asarray(t)
    if (t_arr < 0).any() or (t_arr >= schedule.t_steps).any():
        raise ValueError(f"timestep {t} outside [0, {schedule.t_steps})")
    ab = schedule.alpha_bars[t_arr]
    if t_arr.ndim:
        ab = ab.reshape(ab.shape + (1,) * (z0.ndim - ab.ndim))
    c0 = np.sqrt(ab).astype(z0.dtype)
    c1 = np.sqrt(1.0 - ab).astype(z0.dtype)
    return c0 * z0 + c1 * eps


@dataclass(frozen=True)
class GuidanceConfig:
    """Single-scale guidance, or dual-scale when task_scale is set."""

    scale: float = 7.5
    task_scale: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ValueError(f"guidance scale must be finite and >= 0, got {self.scale}")
        if self.task_scale is not None and (not np.isfinite(self.task_scale) or self.task_scale < 0):
            raise ValueError(f"task guidance scale must be finite and >= 0, got {self.task_scale}")


def cfg_combine(eps_uncond, eps_cond, s: float):
    """Extrapolate from the unconditional toward the conditional estimate."""
    return eps_uncond + s * (eps_cond - eps_uncond)


def dual_cfg_combine(eps_00, eps_i0, eps_ic, s_img: float, s_task: float):
    """Two-condition guidance: image context at s_img, task at s_task."""
    return eps_00 + s_img * (eps_i0 - eps_00) + s_task * (eps_ic - eps_i0)


def training_loss(model, schedule: NoiseSchedule, z0_set: np.ndarray, condition, t, eps: np.ndarray,
                  dropout_draw: float, dropout_p: float = 0.1, task_embeddings: Tensor | None = None):
    """Noise-prediction MSE with condition dropout.

    ``condition`` is the clean latent set (paired variant) or the feature
    set (external variant). When ``dropout_draw`` falls below
    ``dropout_p`` the condition (and any task embeddings, jointly) is
    zeroed so the unconditional pathway trains. Returns the scalar loss
    tensor; run under a Tape to differentiate.
    """
    from .conditioning import inject_condition

    variant = model.config.variant
    z_t = q_sample(z0_set, t, eps, schedule)
    dropped = dropout_draw < dropout_p
    cond_arr = condition.data if isinstance(condition, Tensor) else np.asarray(condition)
    if dropped:
        cond_arr = np.zeros_like(cond_arr)
    if variant == VARIANT_PAIRED:
        inputs = Tensor(np.stack([cond_arr, z_t], axis=1))
        if task_embeddings is not None and not dropped:
            inputs = inject_condition(inputs, task_embeddings, variant)
        pred = model.forward(inputs, t)
    elif variant == VARIANT_EXTERNAL:
        feats = Tensor(cond_arr)
        if task_embeddings is not None and not dropped:
            feats = inject_condition(feats, task_embeddings, variant)
        pred = model.forward(Tensor(z_t), t, features=feats)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    diff = T.sub(pred, Tensor(eps.astype(pred.dtype)))
    return T.mean(T.mul(diff, diff))


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule, eta: float = 0.0, noise: np.ndarray | None = None) -> np.ndarray:
    """One reverse step from t to t_prev (t_prev = -1 lands on clean).

    Predicts x0 from the noise estimate, then re-points toward t_prev;
    eta blends in fresh noise (eta=0 is fully deterministic).
    """
    if t_prev >= t:
        raise ValueError(f"t_prev must be below t, got {t_prev} >= {t}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    ab_t = schedule.alpha_bars[t]
    ab_prev = 1.0 if t_prev < 0 else schedule.alpha_bars[t_prev]
    x0 = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    out = np.sqrt(ab_prev) * x0 + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0.0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise draw")
        out = out + sigma * noise
    return out.astype(z_t.dtype)


def ddim_timesteps(t_steps: int, n_steps: int) -> list[int]:
    """Descending timestep ladder from T-1 to 0, n_steps entries."""
    if n_steps < 1:
        raise ValueError("need at least one sampling step")
    if n_steps >= t_steps:
        return list(range(t_steps - 1, -1, -1))
    ts = np.linspace(t_steps - 1, 0, n_steps).round().astype(int)
    return sorted(set(int(v) for v in ts), reverse=True)


def ddim_sample(eps_fn, shape, schedule: NoiseSchedule, n_steps: int,
                rng: np.random.Generator, eta: float = 0.0, dtype=np.float32) -> np.ndarray:
    """Full reverse trajectory from fresh Gaussian noise.

    ``eps_fn(z_t, t) -> eps_hat`` wraps the model call including any
    guidance combination. The final step targets t_prev = -1.
    """
    z = rng.standard_normal(shape).astype(dtype)
    ladder = ddim_timesteps(schedule.t_steps, n_steps)
    for i, t in enumerate(ladder):
        t_prev = ladder[i + 1] if i + 1 < len(ladder) else -1
        eps_hat = eps_fn(z, t)
        if not np.isfinite(eps_hat).all():
            raise NumericalError(f"non-finite noise prediction at t={t}")
        noise = rng.standard_normal(shape).astype(dtype) if eta > 0 else None
        z = ddim_step(z, eps_hat, t, t_prev, schedule, eta, noise)
    return z

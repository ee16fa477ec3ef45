"""Autoregressive inference: generate, feed back, slide the window.

Each iteration samples one block of images (a single image for the
external-feature variant) conditioned on the clean contexts currently
in the window, then pushes the result back as new context. The window
never exposes more than its capacity to the model; eviction is FIFO.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .conditioning import TaskCondition, embed_conditions, inject_condition
from .diffusion import GuidanceConfig, NoiseSchedule, cfg_combine, ddim_sample, dual_cfg_combine
from .tensor import Tensor
from .unet import VARIANT_EXTERNAL, VARIANT_PAIRED, VARIANTS


class ContextWindow:
    """Bounded FIFO of per-image clean contexts (latents or features).

    Each entry is one image's context array plus its optional task
    condition; pushing beyond capacity evicts the oldest entries.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"window capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: deque = deque()

    def push(self, context: np.ndarray, condition: TaskCondition | None = None):
        self._entries.append((np.asarray(context), condition))
        while len(self._entries) > self.capacity:
            self._entries.popleft()

    def __len__(self) -> int:
        return len(self._entries)

    def contexts(self) -> list[np.ndarray]:
        return [c for c, _ in self._entries]

    def conditions(self) -> list[TaskCondition | None]:
        return [cond for _, cond in self._entries]


@dataclass(frozen=True)
class GenerationPlan:
    """Everything one generation job needs besides the model weights."""

    variant: str
    total_images: int
    per_iteration: int
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    context_capacity: int = 4
    sampler_steps: int = 50
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == VARIANT_EXTERNAL and self.per_iteration != 1:
            raise ValueError("the external-feature variant emits exactly 1 image per iteration")
        if self.per_iteration < 1 or self.total_images < 0:
            raise ValueError("per_iteration must be >= 1 and total_images >= 0")
        if self.variant == VARIANT_PAIRED and self.context_capacity % self.per_iteration:
            raise ValueError(
                f"window capacity {self.context_capacity} must be a multiple of the "
                f"block size {self.per_iteration}")


@dataclass
class GenerationResult:
    latents: list  # one [C, H, W] latent per generated image, in order
    iterations: int


def _model_eps(model, z_full: np.ndarray, cond_arr: np.ndarray, t: int,
               task_emb: Tensor | None, n_new: int) -> np.ndarray:
    """One conditional model call; returns predictions for the new slots."""
    if model.config.variant == VARIANT_PAIRED:
        inputs = Tensor(np.stack([cond_arr, z_full], axis=1))
        if task_emb is not None:
            inputs = inject_condition(inputs, task_emb, VARIANT_PAIRED)
        pred = model.forward(inputs, t)
    else:
        feats = Tensor(cond_arr)
        if task_emb is not None:
            feats = inject_condition(feats, task_emb, VARIANT_EXTERNAL)
        pred = model.forward(Tensor(z_full), t, features=feats)
    return pred.data[:, -n_new:]


def generate_next(model, ctx: ContextWindow, plan: GenerationPlan, rng: np.random.Generator,
                  schedule: NoiseSchedule, new_conditions=None, task_embedder=None) -> np.ndarray:
    """Sample the next block of latents conditioned on the window.

    Runs the full DDIM loop with classifier-free guidance; with an empty
    window the conditional branch degenerates to the unconditional one.
    Returns [per_iteration, C, H, W].
    """
    cfg = model.config
    if plan.variant != cfg.variant:
        raise ValueError(f"plan variant {plan.variant!r} does not match model {cfg.variant!r}")
    n_ctx = len(ctx)
    assert n_ctx <= ctx.capacity, "context window exceeded its capacity"
    if cfg.variant == VARIANT_PAIRED and n_ctx % cfg.block_size:
        raise ValueError(f"context of {n_ctx} images does not align to blocks of {cfg.block_size}")
    n_new = plan.per_iteration
    n_total = n_ctx + n_new
    ch, lh, lw = cfg.latent_channels, cfg.latent_h, cfg.latent_w

    if cfg.variant == VARIANT_PAIRED:
        cond = np.zeros((1, n_total, ch, lh, lw), dtype=np.float32)
        for i, c in enumerate(ctx.contexts()):
            cond[0, i] = c
    else:
        cond = np.zeros((1, n_total, cfg.feature_tokens, cfg.feature_dim), dtype=np.float32)
        for i, c in enumerate(ctx.contexts()):
            cond[0, i] = c
    uncond = np.zeros_like(cond)

    task_emb = None
    if new_conditions is not None:
        if task_embedder is None:
            raise ValueError("task conditions given but no embedder")
        if len(new_conditions) != n_new:
            raise ValueError(f"need one condition per new image, got {len(new_conditions)}")
        all_conds = [c if c is not None else TaskCondition("none") for c in ctx.conditions()]
        all_conds += list(new_conditions)
        task_emb = embed_conditions([all_conds], task_embedder)

    s_img = plan.guidance.scale
    s_task = plan.guidance.task_scale

    def eps_fn(z_block, t):
        z_full = np.zeros((1, n_total, ch, lh, lw), dtype=np.float32)
        z_full[0, n_ctx:] = z_block
        eps_u = _model_eps(model, z_full, uncond, t, None, n_new)
        if task_emb is not None and s_task is not None:
            eps_c = _model_eps(model, z_full, cond, t, None, n_new)
            eps_tc = _model_eps(model, z_full, cond, t, task_emb, n_new)
            return dual_cfg_combine(eps_u, eps_c, eps_tc, s_img, s_task)[0]
        eps_c = _model_eps(model, z_full, cond, t, task_emb, n_new)
        return cfg_combine(eps_u, eps_c, s_img)[0]

    block = ddim_sample(lambda z, t: eps_fn(z, t), (n_new, ch, lh, lw), schedule,
                        plan.sampler_steps, rng, plan.eta)
    return block


def run_autoregressive(model, seed_contexts, plan: GenerationPlan, schedule: NoiseSchedule,
                       encoder=None, autoencoder=None, task_conditions=None) -> GenerationResult:
    """Generate ``plan.total_images`` latents, feeding outputs back in.

    ``seed_contexts`` are ready-made context entries (clean latents for
    the paired variant, feature arrays for the external one). For the
    external variant each generated latent is decoded and re-encoded
    through ``encoder``/``autoencoder`` before joining the window.
    ``task_conditions``, when given, carries one TaskCondition per image
    of the whole sequence (seeds first, then generated).
    """
    cfg = model.config
    seed_contexts = list(seed_contexts)
    if len(seed_contexts) > plan.context_capacity:
        raise ValueError(
            f"{len(seed_contexts)} seed images exceed the context window {plan.context_capacity}")
    if cfg.variant == VARIANT_PAIRED and len(seed_contexts) % cfg.block_size:
        raise ValueError(f"seed count {len(seed_contexts)} does not align to blocks of {cfg.block_size}")
    if cfg.variant == VARIANT_EXTERNAL and plan.total_images > 0:
        if encoder is None or autoencoder is None:
            raise ValueError("the external-feature variant needs encoder and autoencoder for feedback")
    total_seq = len(seed_contexts) + plan.total_images
    if task_conditions is not None and len(task_conditions) != total_seq:
        raise ValueError(f"need {total_seq} task conditions (seeds + generated), got {len(task_conditions)}")

    task_embedder = getattr(model, "task_embedder", None)
    ctx = ContextWindow(plan.context_capacity)
    for i, entry in enumerate(seed_contexts):
        ctx.push(entry, task_conditions[i] if task_conditions is not None else None)

    outputs = []
    iterations = 0
    produced = 0
    while produced < plan.total_images:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=plan.seed, spawn_key=(iterations,)))
        new_conds = None
        if task_conditions is not None:
            base = len(seed_contexts) + produced
            new_conds = task_conditions[base : base + plan.per_iteration]
        block = generate_next(model, ctx, plan, rng, schedule, new_conds, task_embedder)
        iterations += 1
        keep = min(plan.per_iteration, plan.total_images - produced)
        for j in range(keep):
            outputs.append(block[j])
        if produced + keep < plan.total_images:
            # feed the full block back; a truncated final block never re-enters
            for j in range(plan.per_iteration):
                cond_j = new_conds[j] if new_conds is not None else None
                if cfg.variant == VARIANT_PAIRED:
                    ctx.push(block[j], cond_j)
                else:
                    image = autoencoder.decode(block[j])
                    ctx.push(encoder.encode(image), cond_j)
        produced += keep
    return GenerationResult(latents=outputs, iterations=iterations)

"""Command-line surface: corpora, training, sampling, eval, benchmarks.

Exit codes: 0 ok, 2 config/usage error, 3 I/O error, 4 numerical
failure. MIST_LOG in {error, info, debug} controls verbosity. Every
command is deterministic given (--seed, config), wall-time fields in
benchmark output aside.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as benchmod
from . import kernels
from .checkpoint import CheckpointError, load_checkpoint, load_into_store, save_checkpoint
from .conditioning import StubEncoder, TaskCondition, look_at_pose
from .config import ConfigError, RunConfig, build_model, format_flat_config, load_config_file
from .dataset import (
    CORPUS_KINDS,
    CorpusError,
    PatchifyAutoencoder,
    build_corpus,
    load_image,
    load_manifest,
    load_record_images,
    record_poses,
    save_image,
)
from .diffusion import NumericalError, training_loss
from .engine import GenerationPlan, run_autoregressive
from .optim import adam_step
from .tensor import Tape, backward
from .tensorio import TensorFormatError
from .unet import VARIANT_EXTERNAL, VARIANT_PAIRED

log = logging.getLogger("mist")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _setup_logging():
    level = os.environ.get("MIST_LOG", "error").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"MIST_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _load_run_config(args, **overrides) -> RunConfig:
    base = load_config_file(args.config) if getattr(args, "config", None) else RunConfig()
    return base.with_overrides(**overrides)


def _echo_config(config: RunConfig, out_dir: Path):
    (out_dir / "effective_config.txt").write_text(format_flat_config(config.to_dict()))


def cmd_build_dataset(args) -> int:
    manifest = build_corpus(num_sets=args.sets, n_per_set=args.n, out_dir=args.out,
                            kind=args.kind, master_seed=args.seed, resolution=args.resolution)
    path = Path(args.out) / "manifest.json"
    print(f"wrote {len(manifest.records)} record(s) to {path}")
    return EXIT_OK


def _sorted_task_conditions(config: RunConfig, record: dict, start: int, count: int):
    if config.task_condition == "none":
        return None
    if config.task_condition == "camera":
        poses = record_poses(record)
        return [TaskCondition("camera", poses[start + i]) for i in range(count)]
    steps = (record.get("payload") or {}).get("steps")
    if steps is None:
        raise CorpusError("corpus records carry no step payload for step_index conditioning")
    return [TaskCondition("step_index", int(steps[start + i])) for i in range(count)]


def cmd_train(args) -> int:
    config = _load_run_config(
        args, variant=args.variant, seed=args.seed, train_steps=args.steps, lr=args.lr,
        dropout_p=args.dropout, t_steps=args.t_steps, n_images=args.n_images,
        block_size=args.block_size, checkpoint_every=args.checkpoint_every,
        task_condition=args.task_condition,
    )
    manifest = load_manifest(args.corpus)
    if not manifest.records:
        raise ConfigError("cannot train on an empty corpus")
    if manifest.n_per_set < config.n_images:
        raise ConfigError(
            f"corpus sets hold {manifest.n_per_set} images but config.n_images={config.n_images}")
    if manifest.resolution != config.resolution:
        raise ConfigError(
            f"corpus resolution {manifest.resolution} != config resolution {config.resolution}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(config, out_dir)

    ae = PatchifyAutoencoder(config.patch)
    encoder = StubEncoder(config.feature_tokens, config.feature_dim)
    latents, features = [], []
    for rec in manifest.records:
        images = load_record_images(args.corpus, rec)
        latents.append(ae.encode_set(images))
        if config.variant == VARIANT_EXTERNAL:
            features.append(encoder.encode_set(images))
    log.info("encoded %d record(s)", len(latents))

    model, store = build_model(config)
    if args.resume:
        bundle = load_checkpoint(args.resume)
        load_into_store(bundle, store)
        log.info("resumed from %s at step %d", args.resume, store.step_count)

    schedule = config.schedule()
    csv_path = out_dir / "train_log.csv"
    mode = "a" if args.resume and csv_path.exists() else "w"
    with open(csv_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss", "dropout_flag"])
        start_step = store.step_count
        for step in range(start_step, config.train_steps):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(step,)))
            rec_idx = int(rng.integers(len(manifest.records)))
            offset = int(rng.integers(manifest.n_per_set - config.n_images + 1))
            z0 = latents[rec_idx][offset : offset + config.n_images][None]
            cond = (features[rec_idx][offset : offset + config.n_images][None]
                    if config.variant == VARIANT_EXTERNAL else z0)
            if config.per_image_t:
                t = rng.integers(config.t_steps, size=(1, config.n_images))
            else:
                t = int(rng.integers(config.t_steps))
            eps = rng.standard_normal(z0.shape).astype(np.float32)
            draw = float(rng.uniform())
            task_emb = None
            if config.task_condition != "none":
                from .conditioning import embed_conditions
                conds = _sorted_task_conditions(config, manifest.records[rec_idx],
                                                offset, config.n_images)
                task_emb = embed_conditions([conds], model.task_embedder)
            with Tape() as tape:
                loss = training_loss(model, schedule, z0, cond, t, eps, draw,
                                     config.dropout_p, task_embeddings=task_emb)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NumericalError(f"loss became non-finite at step {step}")
            grads = store.named_grads(backward(loss, tape))
            adam_step(store, grads, config.lr, config.adam_beta1, config.adam_beta2,
                      config.adam_eps)
            dropped = int(draw < config.dropout_p)
            writer.writerow([step, f"{loss_val:.6f}", dropped])
            if (step + 1) % config.checkpoint_every == 0 and step + 1 < config.train_steps:
                save_checkpoint(out_dir / f"ckpt_{step + 1:06d}.misc", config.to_dict(), store)
            log.debug("step %d loss %.5f", step, loss_val)

    final = out_dir / "ckpt_final.misc"
    save_checkpoint(final, config.to_dict(), store)
    print(f"trained {config.train_steps - start_step} step(s); checkpoint at {final}")
    return EXIT_OK


def _ring_conditions(config: RunConfig, total: int):
    if config.task_condition == "none":
        return None
    if config.task_condition == "camera":
        return [TaskCondition("camera", look_at_pose(2.0 * np.pi * i / max(total, 1), elevation=0.35))
                for i in range(total)]
    return [TaskCondition("step_index", i) for i in range(total)]


def cmd_sample(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    config = RunConfig.from_dict(bundle.config).with_overrides(
        sampler_steps=args.steps, guidance_scale=args.guidance,
        task_guidance_scale=args.task_guidance, context_window=args.window, seed=args.seed,
    )
    model, store = build_model(config)
    load_into_store(bundle, store)

    per_iter = args.per_iter if args.per_iter is not None else (
        config.block_size if config.variant == VARIANT_PAIRED else 1)
    seed_paths = args.seed_images or []
    if len(seed_paths) > config.context_window:
        raise ConfigError(
            f"{len(seed_paths)} seed image(s) exceed the context window {config.context_window}")

    ae = PatchifyAutoencoder(config.patch)
    encoder = StubEncoder(config.feature_tokens, config.feature_dim)
    seeds = []
    for p in seed_paths:
        img = load_image(Path(p))
        if img.shape[0] != config.resolution or img.shape[1] != config.resolution:
            raise ConfigError(f"seed image {p} is {img.shape[1]}x{img.shape[0]}, "
                              f"expected {config.resolution}x{config.resolution}")
        seeds.append(ae.encode(img) if config.variant == VARIANT_PAIRED else encoder.encode(img))

    plan = GenerationPlan(
        variant=config.variant, total_images=args.total, per_iteration=per_iter,
        guidance=config.guidance(), context_capacity=config.context_window,
        sampler_steps=config.sampler_steps, eta=config.eta, seed=config.seed,
    )
    task_conditions = _ring_conditions(config, len(seeds) + args.total)
    result = run_autoregressive(model, seeds, plan, config.schedule(), encoder=encoder,
                                autoencoder=ae, task_conditions=task_conditions)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(config, out_dir)
    files = []
    for i, latent in enumerate(result.latents):
        rel = f"gen_{i:03d}.png"
        save_image(out_dir / rel, ae.decode(latent))
        files.append(rel)
    provenance = {
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "checkpoint": str(args.checkpoint),
        "guidance_scale": config.guidance_scale,
        "task_guidance_scale": config.task_guidance_scale,
        "sampler_steps": config.sampler_steps,
        "iterations": result.iterations,
        "kernel_backend": kernels.backend_name(),
        "files": files,
    }
    (out_dir / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    print(f"generated {len(files)} image(s) in {result.iterations} iteration(s) -> {out_dir}")
    return EXIT_OK


def _load_image_dir(path: Path) -> list:
    files = sorted(Path(path).glob("*.png"))
    return [load_image(f) for f in files]


def cmd_eval(args) -> int:
    generated = _load_image_dir(args.generated)
    context = _load_image_dir(args.context)
    if not generated:
        raise ConfigError(f"no generated PNGs found in {args.generated}")
    if not context:
        raise ConfigError(f"no context PNGs found in {args.context}")
    encoder = StubEncoder(args.tokens, args.dim)
    gen_feats = np.stack([encoder.encode(img).reshape(-1) for img in generated])
    ctx_feats = np.stack([encoder.encode(img).reshape(-1) for img in context])
    ctx_mean = ctx_feats.mean(axis=0)

    def cosine(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            return 1.0 if na == nb else 0.0
        return float(np.dot(a, b) / (na * nb))

    per_image = [cosine(f, ctx_mean) for f in gen_feats]
    metrics = {
        "feature_consistency_mean": float(np.mean(per_image)),
        "within_set_variance": float(gen_feats.var(axis=0).mean()),
        "per_image": per_image,
    }
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_bench_attn(args) -> int:
    checked = benchmod.verify_cost_model(n_grids=args.grids, seed=args.seed)
    log.info("cost model verified on %d random layouts", checked)
    rows = []
    for n, b, h, w in ((4, 1, 1, 1), (4, 2, 4, 4), (4, 2, 8, 8), (4, 1, 16, 16)):
        rows.extend(benchmod.bench_cross_attention(n, b, h, w, dim=args.dim,
                                                   runs=args.runs, seed=args.seed))
    text = benchmod.rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    print(f"# cost model verified on {checked} random layouts", file=sys.stderr)
    return EXIT_OK


def cmd_bench_kernels(args) -> int:
    rows = benchmod.bench_kernel_backends(seq_len=args.seq_len, dim=args.dim,
                                          runs=args.runs, seed=args.seed)
    print(json.dumps(rows, indent=2))
    if len(rows) < 2:
        print("# compiled kernels unavailable; showing python fallback only", file=sys.stderr)
    return EXIT_OK


def _nonneg(value: str) -> int:
    n = int(value)
    if n < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mist",
                                     description="Desk-scale autoregressive multi-image diffusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="write a procedural corpus")
    p.add_argument("--kind", choices=CORPUS_KINDS, default="mis")
    p.add_argument("--sets", type=_nonneg, default=10)
    p.add_argument("--n", type=int, default=5, help="images per set (multiview always uses 12)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train a denoiser on a corpus")
    p.add_argument("--corpus", required=True, help="path to manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--variant", choices=(VARIANT_PAIRED, VARIANT_EXTERNAL))
    p.add_argument("--steps", type=int, dest="steps")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--dropout", type=float, dest="dropout")
    p.add_argument("--t-steps", type=int, dest="t_steps")
    p.add_argument("--n-images", type=int, dest="n_images")
    p.add_argument("--block-size", type=int, dest="block_size")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--task-condition", choices=("none", "camera", "step_index"),
                   dest="task_condition")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate images autoregressively")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--total", type=_nonneg, default=4)
    p.add_argument("--per-iter", type=int, dest="per_iter")
    p.add_argument("--window", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance", type=float)
    p.add_argument("--task-guidance", type=float, dest="task_guidance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seed-images", nargs="*", dest="seed_images",
                   help="paths of context images pushed before generation")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="feature-consistency metrics")
    p.add_argument("--generated", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("--out")
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--dim", type=int, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-attn", help="attention cost benchmark")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--grids", type=int, default=20)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_attn)

    p = sub.add_parser("bench-kernels", help="compiled vs fallback kernel benchmark")
    p.add_argument("--seq-len", type=int, default=256, dest="seq_len")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_kernels)

    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, CheckpointError, TensorFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

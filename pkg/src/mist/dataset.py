"""Procedural multi-image-set corpora and the latent autoencoder stub.

Sets mirror the synthetic recipe: one scene description shared by every
image in a set (the interconnection), per-image seeded jitter of
placement, scale, rotation and texture (the distinctiveness). Two
fine-tuning corpus kinds exist alongside the generic one: a 12-view
ring around a parametric object with stored camera poses, and monotone
progress sequences with stored step indices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .conditioning import CameraPose, look_at_pose

SCHEMA_VERSION = 1
MULTIVIEW_COUNT = 12

SHAPES = ("circle", "square", "triangle", "ring")
STYLES = ("flat", "noise-texture", "outline")
COUNT_WORDS = {1: "one", 2: "two", 3: "three"}

PALETTE = {
    "red": (220, 50, 40),
    "green": (60, 170, 80),
    "blue": (50, 90, 210),
    "yellow": (230, 200, 60),
    "purple": (140, 70, 180),
    "orange": (240, 140, 40),
    "teal": (40, 170, 170),
    "pink": (230, 120, 170),
}
BACKGROUNDS = {
    "white": (245, 245, 245),
    "black": (25, 25, 25),
    "gray": (128, 128, 128),
    "navy": (25, 30, 70),
    "cream": (250, 240, 215),
}


class CorpusError(ValueError):
    """Invalid corpus configuration or broken on-disk state."""


def caption_filter(spec_text: str, max_tokens: int = 77) -> bool:
    """Accept captions of at most ``max_tokens`` whitespace tokens."""
    return len(spec_text.split()) <= max_tokens


@dataclass(frozen=True)
class SceneSpec:
    """Shared conditioning of one image set."""

    shape: str
    color: str
    background: str
    style: str
    count: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in PALETTE:
            raise ValueError(f"unknown color {self.color!r}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        if self.style not in STYLES:
            raise ValueError(f"unknown style {self.style!r}")
        if self.count not in COUNT_WORDS:
            raise ValueError(f"count must be 1..3, got {self.count}")

    def canonical_text(self) -> str:
        plural = "s" if self.count > 1 else ""
        return (f"{COUNT_WORDS[self.count]} {self.color} {self.shape}{plural} "
                f"in {self.style} style on {self.background} background")

    @classmethod
    def parse(cls, text: str) -> "SceneSpec":
        toks = text.split()
        count = {v: k for k, v in COUNT_WORDS.items()}[toks[0]]
        shape = toks[2] if count == 1 else toks[2][:-1]
        return cls(shape=shape, color=toks[1], background=toks[7], style=toks[4], count=count)


def random_spec(rng: np.random.Generator) -> SceneSpec:
    return SceneSpec(
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=sorted(PALETTE)[rng.integers(len(PALETTE))],
        background=sorted(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))],
        style=STYLES[rng.integers(len(STYLES))],
        count=int(rng.integers(1, 4)),
    )


def _shape_masks(shape, cx, cy, radius, angle, ys, xs):
    """(solid, outline) boolean masks of one placed shape instance."""
    u = xs - cx
    v = ys - cy
    ur = np.cos(angle) * u + np.sin(angle) * v
    vr = -np.sin(angle) * u + np.cos(angle) * v
    band = 0.22 * radius
    if shape == "circle":
        r = np.hypot(ur, vr)
        return r <= radius, np.abs(r - radius) <= band
    if shape == "square":
        r = np.maximum(np.abs(ur), np.abs(vr))
        return r <= radius, np.abs(r - radius) <= band
    if shape == "ring":
        r = np.hypot(ur, vr)
        solid = (r >= 0.55 * radius) & (r <= radius)
        edge = (np.abs(r - radius) <= band * 0.6) | (np.abs(r - 0.55 * radius) <= band * 0.6)
        return solid, edge
    # triangle: circumradius-r vertices, inside = same side of all edges
    angles = angle + np.array([np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3])
    vx, vy = radius * np.cos(angles), radius * np.sin(angles)
    inside = np.ones_like(u, dtype=bool)
    dist_edges = []
    for i in range(3):
        j = (i + 1) % 3
        ex, ey = vx[j] - vx[i], vy[j] - vy[i]
        cross = ex * (v - vy[i]) - ey * (u - vx[i])
        inside &= cross >= 0
        dist_edges.append(np.abs(cross) / np.hypot(ex, ey))
    edge = inside & (np.minimum.reduce(dist_edges) <= band)
    near = np.minimum.reduce(dist_edges) <= band * 0.7
    return inside, (inside & (np.minimum.reduce(dist_edges) <= band)) | (near & inside) | edge


def render_scene(spec: SceneSpec, resolution: int, jitter_rng: np.random.Generator,
                 fill_fraction: float | None = None) -> np.ndarray:
    """Rasterize one scene; all stochastic choices come from jitter_rng."""
    h = w = resolution
    ys, xs = np.mgrid[0:h, 0:w]
    ys = (ys + 0.5) / h
    xs = (xs + 0.5) / w
    img = np.empty((h, w, 3), dtype=np.float32)
    img[:] = np.array(BACKGROUNDS[spec.background], dtype=np.float32) / 255.0
    color = np.array(PALETTE[spec.color], dtype=np.float32) / 255.0

    for _ in range(spec.count):
        cx, cy = jitter_rng.uniform(0.28, 0.72, size=2)
        radius = jitter_rng.uniform(0.13, 0.21)
        angle = jitter_rng.uniform(0.0, 2.0 * np.pi)
        solid, outline = _shape_masks(spec.shape, cx, cy, radius, angle, ys, xs)
        if fill_fraction is not None:
            rows = np.nonzero(solid.any(axis=1))[0]
            if rows.size:
                top, bottom = rows[0], rows[-1]
                cut = bottom - fill_fraction * (bottom - top)
                filled = solid & (np.arange(h)[:, None] >= cut)
            else:
                filled = solid
            img[outline] = color
            img[filled] = color
            continue
        if spec.style == "flat":
            img[solid] = color
        elif spec.style == "outline":
            img[outline] = color
        else:  # noise-texture
            speckle = 1.0 + 0.3 * (jitter_rng.random((h, w, 1), dtype=np.float32) - 0.5)
            textured = np.clip(color * speckle, 0.0, 1.0)
            img[solid] = textured[solid]
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def render_view(spec: SceneSpec, pose: CameraPose, axes, resolution: int) -> np.ndarray:
    """Orthographic silhouette of an ellipsoid plus a front-face marker.

    The silhouette ellipse is the Schur complement of the rotated
    inverse-shape matrix, so the outline responds smoothly to the pose.
    """
    h = w = resolution
    rot = pose.extrinsic[:3, :3]
    a = np.asarray(axes, dtype=np.float64)
    inv_shape = rot @ np.diag(1.0 / a**2) @ rot.T
    b2 = inv_shape[:2, :2] - np.outer(inv_shape[:2, 2], inv_shape[2, :2]) / inv_shape[2, 2]

    span = 2.4 * float(a.max())
    ys, xs = np.mgrid[0:h, 0:w]
    u = (xs + 0.5) / w * span - span / 2
    v = span / 2 - (ys + 0.5) / h * span
    quad = b2[0, 0] * u * u + 2 * b2[0, 1] * u * v + b2[1, 1] * v * v
    inside = quad <= 1.0

    img = np.empty((h, w, 3), dtype=np.float32)
    img[:] = np.array(BACKGROUNDS[spec.background], dtype=np.float32) / 255.0
    color = np.array(PALETTE[spec.color], dtype=np.float32) / 255.0
    img[inside] = color

    marker_world = np.array([a[0], 0.0, 0.0])
    cam = rot @ marker_world
    if cam[2] > 0.05:  # front-facing
        mr = 0.18 * float(a.max())
        marker = (u - cam[0]) ** 2 + (v - cam[1]) ** 2 <= mr**2
        img[marker & inside] = 1.0 - color
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


@dataclass
class ImageSetRecord:
    """One set: images plus per-image seeds and optional task payload."""

    set_id: str
    spec: SceneSpec
    images: np.ndarray  # [N, H, W, 3] uint8
    seeds: list
    payload: dict | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be [N, H, W, 3], got {self.images.shape}")
        if len(self.seeds) != self.images.shape[0]:
            raise ValueError("one seed per image required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("per-image seeds must be pairwise distinct")


def _image_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=base_seed, spawn_key=(index,)).generate_state(1)[0])


def synthesize_set(spec: SceneSpec, n: int, base_seed: int, resolution: int = 32,
                   set_id: str = "set") -> ImageSetRecord:
    """N images sharing the spec, differing only in seeded jitter."""
    if n < 1:
        raise ValueError(f"need at least one image, got {n}")
    seeds = [_image_seed(base_seed, i) for i in range(n)]
    images = np.stack([
        render_scene(spec, resolution, np.random.default_rng(s)) for s in seeds
    ])
    return ImageSetRecord(set_id=set_id, spec=spec, images=images, seeds=seeds)


def synthesize_multiview_set(spec: SceneSpec, base_seed: int, resolution: int = 32,
                             set_id: str = "set") -> ImageSetRecord:
    """One object rendered from 12 ring viewpoints, poses in the payload."""
    rng = np.random.default_rng(_image_seed(base_seed, 0))
    axes = np.array([0.95, 0.6, 0.38]) * rng.uniform(0.85, 1.15)
    poses = [look_at_pose(2.0 * np.pi * k / MULTIVIEW_COUNT, elevation=0.35)
             for k in range(MULTIVIEW_COUNT)]
    images = np.stack([render_view(spec, p, axes, resolution) for p in poses])
    seeds = [_image_seed(base_seed, i) for i in range(MULTIVIEW_COUNT)]
    payload = {"poses": [p.extrinsic.reshape(16).tolist() for p in poses]}
    return ImageSetRecord(set_id=set_id, spec=spec, images=images, seeds=seeds, payload=payload)


def synthesize_procedure_set(spec: SceneSpec, n: int, base_seed: int, resolution: int = 32,
                             set_id: str = "set") -> ImageSetRecord:
    """Monotone progression: step k shows the subject filled to k/N."""
    if n < 1:
        raise ValueError(f"need at least one step, got {n}")
    placement_seed = _image_seed(base_seed, 0)
    images = np.stack([
        render_scene(spec, resolution, np.random.default_rng(placement_seed), fill_fraction=k / n)
        for k in range(n)
    ])
    seeds = [_image_seed(base_seed, i) for i in range(n)]
    return ImageSetRecord(set_id=set_id, spec=spec, images=images, seeds=seeds,
                          payload={"steps": list(range(n))})


@dataclass
class Manifest:
    """Corpus index: records plus the shared geometry/config."""

    name: str
    n_per_set: int
    resolution: int
    records: list  # [{id, spec_text, files, payload}]
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "schema_version": self.schema_version,
            "n_per_set": self.n_per_set,
            "resolution": self.resolution,
            "records": self.records,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise CorpusError(f"unsupported manifest schema version {d.get('schema_version')!r}")
        return cls(name=d["name"], n_per_set=d["n_per_set"], resolution=d["resolution"],
                   records=d["records"], schema_version=d["schema_version"])


def save_image(path: Path, image: np.ndarray):
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def save_manifest(manifest: Manifest, out_dir: Path) -> Path:
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path: Path, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        manifest = Manifest.from_dict(json.loads(path.read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot read manifest {path}: {exc}") from exc
    if check_files:
        base = path.parent
        for rec in manifest.records:
            for rel in rec["files"]:
                if not (base / rel).exists():
                    raise CorpusError(f"manifest references missing file {rel} (record {rec['id']})")
            if len(rec["files"]) != manifest.n_per_set:
                raise CorpusError(f"record {rec['id']} has {len(rec['files'])} files, "
                                  f"expected {manifest.n_per_set}")
    return manifest


def load_record_images(manifest_path: Path, record: dict) -> np.ndarray:
    base = Path(manifest_path).parent
    return np.stack([load_image(base / rel) for rel in record["files"]])


def record_poses(record: dict) -> list[CameraPose]:
    payload = record.get("payload") or {}
    return [CameraPose(np.array(flat, dtype=np.float64).reshape(4, 4))
            for flat in payload.get("poses", [])]


CORPUS_KINDS = ("mis", "multiview", "procedure")


def build_corpus(num_sets: int, n_per_set: int, out_dir: Path, kind: str = "mis",
                 master_seed: int = 0, resolution: int = 32, max_caption_tokens: int = 77) -> Manifest:
    """Write a deterministic corpus; (arguments, master_seed) fix every byte."""
    if kind not in CORPUS_KINDS:
        raise CorpusError(f"kind must be one of {CORPUS_KINDS}, got {kind!r}")
    if num_sets < 0 or n_per_set < 1:
        raise CorpusError(f"need num_sets >= 0 and n_per_set >= 1, got {num_sets}, {n_per_set}")
    if kind == "multiview":
        n_per_set = MULTIVIEW_COUNT
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for idx in range(num_sets):
        seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(idx,))
        rec_rng = np.random.default_rng(seq)
        spec = random_spec(rec_rng)
        while not caption_filter(spec.canonical_text(), max_caption_tokens):
            spec = random_spec(rec_rng)  # palette texts never trip this; kept for custom specs
        base_seed = int(seq.generate_state(2)[1])
        set_id = f"{kind}-{idx:05d}"
        if kind == "mis":
            rec = synthesize_set(spec, n_per_set, base_seed, resolution, set_id)
        elif kind == "multiview":
            rec = synthesize_multiview_set(spec, base_seed, resolution, set_id)
        else:
            rec = synthesize_procedure_set(spec, n_per_set, base_seed, resolution, set_id)
        files = []
        for i in range(rec.images.shape[0]):
            rel = f"{set_id}_{i:02d}.png"
            save_image(out_dir / rel, rec.images[i])
            files.append(rel)
        records.append({
            "id": set_id,
            "spec_text": spec.canonical_text(),
            "files": files,
            "payload": rec.payload,
        })
    manifest = Manifest(name=f"{kind}-corpus", n_per_set=n_per_set, resolution=resolution,
                        records=records)
    save_manifest(manifest, out_dir)
    return manifest


@dataclass(frozen=True)
class PatchifyAutoencoder:
    """Exactly invertible space-to-depth latent codec.

    encode: 8-bit RGB -> [3*p*p, H/p, W/p] float latents in [-1, 1];
    decode reverses it, exact up to the 8-bit quantization grid.
    """

    patch: int = 4

    def latent_shape(self, resolution: int) -> tuple:
        if resolution % self.patch:
            raise ValueError(f"resolution {resolution} not divisible by patch {self.patch}")
        side = resolution // self.patch
        return (3 * self.patch * self.patch, side, side)

    def encode(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected [H, W, 3] image, got {img.shape}")
        h, w = img.shape[:2]
        p = self.patch
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} not divisible by patch {p}")
        x = img.astype(np.float32) / 255.0 * 2.0 - 1.0
        x = x.reshape(h // p, p, w // p, p, 3)
        return np.ascontiguousarray(x.transpose(4, 1, 3, 0, 2)).reshape(3 * p * p, h // p, w // p)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        p = self.patch
        c, hh, ww = latent.shape
        if c != 3 * p * p:
            raise ValueError(f"latent has {c} channels, expected {3 * p * p}")
        x = latent.reshape(3, p, p, hh, ww).transpose(3, 1, 4, 2, 0)
        x = x.reshape(hh * p, ww * p, 3)
        return np.clip(np.round((x + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)

    def encode_set(self, images: np.ndarray) -> np.ndarray:
        return np.stack([self.encode(img) for img in images])

"""Corpus synthesis, formats, and the latent autoencoder stub."""

import json
from pathlib import Path

import numpy as np
import pytest

from mist.conditioning import StubEncoder
from mist.dataset import (
    CorpusError,
    Manifest,
    PatchifyAutoencoder,
    SceneSpec,
    build_corpus,
    caption_filter,
    load_image,
    load_manifest,
    load_record_images,
    random_spec,
    record_poses,
    save_manifest,
    synthesize_multiview_set,
    synthesize_procedure_set,
    synthesize_set,
)


class TestCaptionFilter:
    def test_boundary_accepts_77(self):
        assert caption_filter(" ".join(["tok"] * 77))

    def test_boundary_plus_one_rejects(self):
        assert not caption_filter(" ".join(["tok"] * 78))

    def test_empty_accepts(self):
        assert caption_filter("")

    def test_total_on_odd_inputs(self):
        for text in ("\t\n", "a" * 10_000, "  spaced   out  ", "#!$%"):
            assert caption_filter(text) in (True, False)


class TestSceneSpec:
    def test_canonical_text_roundtrip(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            spec = random_spec(rng)
            assert SceneSpec.parse(spec.canonical_text()) == spec

    def test_token_count_is_small(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            assert len(random_spec(rng).canonical_text().split()) <= 9

    def test_invalid_fields_rejected(self):
        with pytest.raises(ValueError):
            SceneSpec("hexagon", "red", "white", "flat", 1)
        with pytest.raises(ValueError):
            SceneSpec("circle", "red", "white", "flat", 4)


class TestSynthesizeSet:
    def test_single_image(self):
        rec = synthesize_set(SceneSpec("circle", "red", "white", "flat", 1), 1, base_seed=0)
        assert rec.images.shape == (1, 32, 32, 3)

    def test_deterministic(self):
        spec = SceneSpec("triangle", "blue", "cream", "noise-texture", 2)
        a = synthesize_set(spec, 4, base_seed=5)
        b = synthesize_set(spec, 4, base_seed=5)
        assert np.array_equal(a.images, b.images)
        assert a.seeds == b.seeds

    def test_seeds_pairwise_distinct(self):
        rec = synthesize_set(SceneSpec("ring", "teal", "black", "flat", 1), 8, base_seed=9)
        assert len(set(rec.seeds)) == 8

    def test_images_within_set_differ(self):
        rec = synthesize_set(SceneSpec("square", "green", "gray", "flat", 2), 4, base_seed=3)
        assert not np.array_equal(rec.images[0], rec.images[1])

    def test_within_set_color_coherence_beats_across_set(self):
        # Monte-Carlo separation: mean-color distance inside a set is
        # smaller than between different random specs in >= 95% of pairs
        rng = np.random.default_rng(7)
        wins = 0
        trials = 100
        for i in range(trials):
            spec_a, spec_b = random_spec(rng), random_spec(rng)
            if spec_a == spec_b:
                wins += 1
                continue
            set_a = synthesize_set(spec_a, 2, base_seed=1000 + i).images
            set_b = synthesize_set(spec_b, 1, base_seed=5000 + i).images
            mean = lambda im: im.reshape(-1, 3).mean(axis=0)
            within = np.linalg.norm(mean(set_a[0]) - mean(set_a[1]))
            across = np.linalg.norm(mean(set_a[0]) - mean(set_b[0]))
            if within < across:
                wins += 1
        assert wins >= 95, wins

    def test_set_attributes_recoverable_from_pixels(self):
        # stub-encoder statistics of same-spec images cluster together
        enc = StubEncoder(16, 32)
        spec = SceneSpec("circle", "orange", "navy", "flat", 3)
        other = SceneSpec("circle", "teal", "white", "flat", 3)
        rec_a = synthesize_set(spec, 3, base_seed=21)
        rec_b = synthesize_set(other, 3, base_seed=22)
        fa = np.stack([enc.encode(im).reshape(-1) for im in rec_a.images])
        fb = np.stack([enc.encode(im).reshape(-1) for im in rec_b.images])
        within = np.linalg.norm(fa - fa.mean(axis=0), axis=1).mean()
        across = np.linalg.norm(fa - fb.mean(axis=0), axis=1).mean()
        assert within < across


class TestMultiview:
    def test_twelve_images_twelve_valid_poses(self):
        spec = SceneSpec("circle", "purple", "white", "flat", 1)
        rec = synthesize_multiview_set(spec, base_seed=4)
        assert rec.images.shape[0] == 12
        poses = record_poses({"payload": rec.payload})
        assert len(poses) == 12
        for p in poses:
            r = p.extrinsic[:3, :3]
            assert np.abs(r.T @ r - np.eye(3)).max() <= 1e-9

    def test_views_differ_across_ring(self):
        spec = SceneSpec("circle", "red", "white", "flat", 1)
        rec = synthesize_multiview_set(spec, base_seed=6)
        distinct = {im.tobytes() for im in rec.images}
        assert len(distinct) >= 10  # near-degenerate pairs allowed, most views distinct


class TestProcedure:
    def test_step_payload_strictly_increasing(self):
        spec = SceneSpec("square", "yellow", "black", "flat", 1)
        rec = synthesize_procedure_set(spec, 5, base_seed=8)
        steps = rec.payload["steps"]
        assert steps == list(range(5))

    def test_fill_is_monotone(self):
        spec = SceneSpec("square", "red", "white", "flat", 1)
        rec = synthesize_procedure_set(spec, 5, base_seed=10)
        color = np.array([220, 50, 40])
        counts = [(np.abs(im.astype(int) - color).sum(axis=2) < 30).sum() for im in rec.images]
        assert all(a <= b for a, b in zip(counts, counts[1:]))
        assert counts[-1] > counts[0]


class TestCorpus:
    def test_determinism_byte_identical(self, tmp_path):
        m1 = build_corpus(3, 4, tmp_path / "a", kind="mis", master_seed=11)
        m2 = build_corpus(3, 4, tmp_path / "b", kind="mis", master_seed=11)
        assert m1.to_dict() == m2.to_dict()
        for rec in m1.records:
            for rel in rec["files"]:
                assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_empty_corpus_valid(self, tmp_path):
        manifest = build_corpus(0, 5, tmp_path, kind="mis")
        loaded = load_manifest(tmp_path / "manifest.json")
        assert loaded.records == [] and manifest.records == []

    def test_manifest_roundtrip_field_for_field(self, tmp_path):
        manifest = build_corpus(2, 3, tmp_path, kind="procedure", master_seed=1)
        loaded = load_manifest(tmp_path / "manifest.json")
        assert loaded.to_dict() == manifest.to_dict()

    def test_missing_file_detected(self, tmp_path):
        build_corpus(1, 2, tmp_path, kind="mis", master_seed=2)
        (tmp_path / "mis-00000_01.png").unlink()
        with pytest.raises(CorpusError, match="missing"):
            load_manifest(tmp_path / "manifest.json")

    def test_schema_version_checked(self, tmp_path):
        build_corpus(1, 2, tmp_path, kind="mis", master_seed=3)
        blob = json.loads((tmp_path / "manifest.json").read_text())
        blob["schema_version"] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(blob))
        with pytest.raises(CorpusError, match="version"):
            load_manifest(tmp_path / "manifest.json")

    def test_record_images_load_back(self, tmp_path):
        build_corpus(1, 3, tmp_path, kind="mis", master_seed=4)
        manifest = load_manifest(tmp_path / "manifest.json")
        images = load_record_images(tmp_path / "manifest.json", manifest.records[0])
        assert images.shape == (3, 32, 32, 3)
        assert images.dtype == np.uint8

    def test_multiview_corpus_forces_twelve(self, tmp_path):
        manifest = build_corpus(1, 5, tmp_path, kind="multiview", master_seed=5)
        assert manifest.n_per_set == 12
        assert len(manifest.records[0]["files"]) == 12


class TestPatchifyAutoencoder:
    def test_roundtrip_exact_on_quantized_images(self):
        rng = np.random.default_rng(13)
        img = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        ae = PatchifyAutoencoder(4)
        assert np.array_equal(ae.decode(ae.encode(img)), img)

    def test_latent_shape_space_to_depth(self):
        ae = PatchifyAutoencoder(4)
        lat = ae.encode(np.zeros((32, 32, 3), dtype=np.uint8))
        assert lat.shape == (48, 8, 8)
        assert ae.latent_shape(32) == (48, 8, 8)

    def test_zero_image_constant_latent(self):
        ae = PatchifyAutoencoder(4)
        lat = ae.encode(np.zeros((16, 16, 3), dtype=np.uint8))
        assert np.array_equal(lat, np.full_like(lat, -1.0))

    def test_indivisible_resolution_rejected(self):
        ae = PatchifyAutoencoder(4)
        with pytest.raises(ValueError, match="divisible"):
            ae.encode(np.zeros((30, 30, 3), dtype=np.uint8))

    def test_latents_roughly_unit_scale(self):
        rng = np.random.default_rng(14)
        img = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        lat = PatchifyAutoencoder(4).encode(img)
        assert lat.min() >= -1.0 and lat.max() <= 1.0

    def test_pixel_index_arithmetic(self):
        # latent channel c = (rgb * p + py) * p + px picks pixel (Y*p+py, X*p+px)
        img = np.zeros((8, 8, 3), dtype=np.uint8)
        img[5, 2, 1] = 255  # Y=1, py=1, X=0, px=2, channel g
        lat = PatchifyAutoencoder(4).encode(img)
        c = (1 * 4 + 1) * 4 + 2
        assert lat[c, 1, 0] == 1.0
        assert (lat == 1.0).sum() == 1

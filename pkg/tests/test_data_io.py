"""Unit tests for IO: label codec, dataset layouts, synthetic generator,
preprocessing, mask PNGs and the raw tensor format."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselcouple.data import (DatasetError, SyntheticTreeConfig, decode_av_label,
                               encode_av_label, generate_synthetic, load_dataset,
                               load_entry, load_mask_png, preprocess, save_mask_png,
                               save_rgb, write_synthetic_dataset)
from vesselcouple.vtsr import VtsrError, read_vtsr, write_vtsr


class TestLabelCodec:
    def test_decode_magenta_is_artery(self):
        img = np.array([[[255, 0, 255]]], dtype=np.uint8)
        l_a, l_v, l_bv, repaired = decode_av_label(img)
        assert (l_a[0, 0], l_v[0, 0], l_bv[0, 0]) == (1.0, 0.0, 1.0)
        assert repaired == 0

    def test_decode_white_is_crossing(self):
        l_a, l_v, l_bv, _ = decode_av_label(
            np.array([[[255, 255, 255]]], dtype=np.uint8))
        assert (l_a[0, 0], l_v[0, 0], l_bv[0, 0]) == (1.0, 1.0, 1.0)

    def test_decode_blue_is_uncertain_vessel(self):
        l_a, l_v, l_bv, _ = decode_av_label(
            np.array([[[0, 0, 255]]], dtype=np.uint8))
        assert (l_a[0, 0], l_v[0, 0], l_bv[0, 0]) == (0.0, 0.0, 1.0)

    def test_encode_vein_is_cyan(self):
        out = encode_av_label(np.array([[0.0]]), np.array([[1.0]]),
                              np.array([[1.0]]))
        np.testing.assert_array_equal(out[0, 0], [0, 255, 255])

    def test_encode_background_is_black(self):
        out = encode_av_label(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
        np.testing.assert_array_equal(out[0, 0], [0, 0, 0])

    def test_subset_violation_repaired_and_counted(self):
        img = np.array([[[255, 0, 0]]], dtype=np.uint8)  # artery, no vessel bit
        l_a, _, l_bv, repaired = decode_av_label(img)
        assert l_a[0, 0] == 1.0 and l_bv[0, 0] == 1.0
        assert repaired == 1

    def test_strict_mode_rejects_antialiased(self):
        img = np.array([[[200, 0, 200]]], dtype=np.uint8)
        with pytest.raises(ValueError):
            decode_av_label(img, strict=True)
        # non-strict binarizes at 128
        l_a, _, l_bv, _ = decode_av_label(img)
        assert l_a[0, 0] == 1.0 and l_bv[0, 0] == 1.0

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_identity(self, seed):
        rng = np.random.default_rng(seed)
        l_a = (rng.random((6, 6)) < 0.4).astype(np.float64)
        l_v = (rng.random((6, 6)) < 0.4).astype(np.float64)
        l_bv = np.maximum(np.maximum(l_a, l_v),
                          (rng.random((6, 6)) < 0.2).astype(np.float64))
        d_a, d_v, d_bv, repaired = decode_av_label(encode_av_label(l_a, l_v, l_bv))
        assert repaired == 0
        np.testing.assert_array_equal(d_a, l_a)
        np.testing.assert_array_equal(d_v, l_v)
        np.testing.assert_array_equal(d_bv, l_bv)


class TestMaskPng:
    def test_round_trip_with_sidecar(self, tmp_path):
        labels = np.arange(12, dtype=np.int32).reshape(3, 4)
        path = tmp_path / "mask.png"
        save_mask_png(path, labels, 12)
        out, n = load_mask_png(path)
        np.testing.assert_array_equal(out, labels)
        assert n == 12

    def test_cluster_count_limit(self, tmp_path):
        with pytest.raises(ValueError):
            save_mask_png(tmp_path / "m.png", np.zeros((2, 2), np.int32), 70000)


class TestVtsr:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip(self, tmp_path, dtype):
        arr = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(dtype)
        path = tmp_path / "t.vtsr"
        write_vtsr(path, arr)
        out = read_vtsr(path)
        assert out.dtype == dtype
        np.testing.assert_array_equal(out, arr)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vtsr"
        path.write_bytes(b"JUNK" + b"\0" * 16)
        with pytest.raises(VtsrError):
            read_vtsr(path)

    def test_truncated_payload(self, tmp_path):
        arr = np.ones((4, 4))
        path = tmp_path / "t.vtsr"
        write_vtsr(path, arr)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(VtsrError):
            read_vtsr(path)


class TestPreprocess:
    def test_constant_image_zeroed(self):
        out = preprocess(np.full((8, 8, 3), 100, dtype=np.uint8),
                         local_contrast=False)
        np.testing.assert_allclose(out, 0.0, atol=1e-9)

    def test_standardized_per_channel(self):
        rng = np.random.default_rng(2)
        out = preprocess(rng.integers(0, 256, (16, 16, 3)).astype(np.uint8))
        for c in range(3):
            assert abs(out[c].mean()) < 1e-6
            assert abs(out[c].std() - 1.0) < 1e-6

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        np.testing.assert_array_equal(preprocess(img), preprocess(img))

    def test_grayscale_promoted(self):
        rng = np.random.default_rng(4)
        out = preprocess(rng.integers(0, 256, (8, 8)).astype(np.uint8))
        assert out.shape == (3, 8, 8)


class TestSynthetic:
    def test_labels_satisfy_subset_invariant(self):
        _, (l_a, l_v, l_bv) = generate_synthetic(SyntheticTreeConfig(seed=0))
        assert np.all(l_a <= l_bv) and np.all(l_v <= l_bv)
        np.testing.assert_array_equal(l_bv, np.maximum(l_a, l_v))

    @pytest.mark.parametrize("seed", range(6))
    def test_vessel_fraction_in_target_band(self, seed):
        _, (_, _, l_bv) = generate_synthetic(SyntheticTreeConfig(seed=seed))
        frac = l_bv.mean()
        assert 0.05 <= frac <= 0.15

    def test_determinism(self):
        cfg = SyntheticTreeConfig(seed=9)
        img1, labs1 = generate_synthetic(cfg)
        img2, labs2 = generate_synthetic(cfg)
        np.testing.assert_array_equal(img1, img2)
        for a, b in zip(labs1, labs2):
            np.testing.assert_array_equal(a, b)

    def test_crossings_are_raster_intersections(self):
        _, (l_a, l_v, l_bv) = generate_synthetic(SyntheticTreeConfig(seed=1))
        crossing = (l_a > 0) & (l_v > 0)
        np.testing.assert_array_equal(crossing, (l_a * l_v) > 0)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SyntheticTreeConfig(width_decay=1.5)


class TestDatasetLayouts:
    def _write_pair(self, img_dir, lbl_dir, stem, size=8):
        rng = np.random.default_rng(abs(hash(stem)) % (2 ** 31))
        img_dir.mkdir(parents=True, exist_ok=True)
        lbl_dir.mkdir(parents=True, exist_ok=True)
        save_rgb(img_dir / f"{stem}.png",
                 rng.integers(0, 256, (size, size, 3)).astype(np.uint8))
        l_a = (rng.random((size, size)) < 0.3).astype(np.float64)
        l_v = ((rng.random((size, size)) < 0.3) * (1 - l_a))
        save_rgb(lbl_dir / f"{stem}.png",
                 encode_av_label(l_a, l_v, np.maximum(l_a, l_v)))

    def test_rite_split_counts(self, tmp_path):
        for sub in ("training", "test"):
            for i in range(20):
                self._write_pair(tmp_path / sub / "images", tmp_path / sub / "av",
                                 f"{sub}_{i:02d}")
        entries = load_dataset(tmp_path, "rite")
        assert sum(1 for e in entries if e.split == "train") == 20
        assert sum(1 for e in entries if e.split == "test") == 20

    def test_lesav_split(self, tmp_path):
        for i in range(22):
            self._write_pair(tmp_path / "images", tmp_path / "labels", f"im{i:02d}")
        entries = load_dataset(tmp_path, "lesav")
        assert sum(1 for e in entries if e.split == "train") == 11
        assert sum(1 for e in entries if e.split == "test") == 11

    def test_hrf_test_split_is_five_per_category(self, tmp_path):
        for cat in ("dr", "g", "h"):
            for i in range(15):
                self._write_pair(tmp_path / "images", tmp_path / "labels",
                                 f"{i:02d}_{cat}")
        entries = load_dataset(tmp_path, "hrf")
        assert sum(1 for e in entries if e.split == "test") == 15
        assert sum(1 for e in entries if e.split == "train") == 30

    def test_flat_orphan_image_reported(self, tmp_path):
        self._write_pair(tmp_path / "images", tmp_path / "labels", "ok")
        rng = np.random.default_rng(0)
        save_rgb(tmp_path / "images" / "orphan.png",
                 rng.integers(0, 256, (8, 8, 3)).astype(np.uint8))
        with pytest.raises(DatasetError) as exc:
            load_dataset(tmp_path, "flat")
        assert any("orphan" in p for p in exc.value.problems)

    def test_unknown_layout(self, tmp_path):
        tmp_path.mkdir(exist_ok=True)
        with pytest.raises(DatasetError):
            load_dataset(tmp_path, "nope")

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "absent", "flat")


class TestSyntheticDataset:
    def test_manifest_and_split(self, tmp_path):
        entries = write_synthetic_dataset(tmp_path, 5,
                                          SyntheticTreeConfig(canvas_size=32))
        assert len(entries) == 5
        assert sum(1 for e in entries if e.split == "test") == 1
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert len(manifest["entries"]) == 5
        for item in manifest["entries"]:
            assert len(item["sha256_image"]) == 64

    def test_entries_load_and_decode(self, tmp_path):
        entries = write_synthetic_dataset(tmp_path, 2,
                                          SyntheticTreeConfig(canvas_size=32))
        img, (l_a, l_v, l_bv), fov = load_entry(entries[0])
        assert img.shape == (32, 32, 3)
        assert l_a.shape == (32, 32)
        assert fov is None
        assert np.all(l_a <= l_bv)

    def test_round_trip_through_loader(self, tmp_path):
        write_synthetic_dataset(tmp_path, 3, SyntheticTreeConfig(canvas_size=32))
        entries = load_dataset(tmp_path, "flat")
        assert len(entries) == 3

"""Unit tests for the network, optimizer and training loop."""

import numpy as np
import pytest

from vesselcouple import autodiff as ad
from vesselcouple.autodiff import Tensor
from vesselcouple.losses import LossWeights
from vesselcouple.model import (CheckpointError, NetConfig, VesselNet,
                                expected_parameter_count, load_checkpoint,
                                save_checkpoint)
from vesselcouple.optim import Adam
from vesselcouple.superpixel import SuperpixelMask
from vesselcouple.train import (AugmentConfig, Sample, TrainConfig, augment,
                                train)


def _input(h=16, w=16, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(1, 3, h, w)))


class TestForward:
    def test_output_shapes_and_range(self):
        net = VesselNet(NetConfig(), seed=0)
        pred, bottleneck = net.forward(_input())
        for ch in (pred.y_a, pred.y_v, pred.y_bv):
            assert ch.data.shape == (16, 16)
            assert np.all((ch.data > 0) & (ch.data < 1))
        assert bottleneck.data.shape == (32, 4, 4)

    def test_bottleneck_dims_scale_with_depth(self):
        net = VesselNet(NetConfig(depth=2, base_channels=4), seed=0)
        _, bottleneck = net.forward(_input(8, 8))
        assert bottleneck.data.shape == (8, 4, 4)

    def test_indivisible_dims_rejected(self):
        net = VesselNet(NetConfig(), seed=0)
        with pytest.raises(ValueError):
            net.forward(Tensor(np.zeros((1, 3, 10, 10))))

    def test_parameter_count_matches_closed_form(self):
        for cfg in (NetConfig(), NetConfig(depth=2, base_channels=4),
                    NetConfig(depth=4, base_channels=8)):
            assert VesselNet(cfg, seed=0).parameter_count() == \
                expected_parameter_count(cfg)

    def test_default_config_parameter_count(self):
        assert expected_parameter_count(NetConfig()) == 29779

    def test_min_depth_enforced(self):
        with pytest.raises(ValueError):
            NetConfig(depth=1)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        Adam({"p": p}, lr=1e-4).step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.ones(1)
        Adam({"p": p}, lr=1e-4).step()
        # bias-corrected first step: lr * 1 / (1 + eps)
        assert p.data[0] == pytest.approx(-1e-4, rel=1e-6)

    def test_constant_gradient_step_approaches_lr(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=1e-3)
        for _ in range(200):
            p.grad = np.ones(1)
            opt.step()
        p.grad = np.ones(1)
        before = p.data[0]
        opt.step()
        assert (before - p.data[0]) == pytest.approx(1e-3, rel=1e-3)

    def test_non_finite_gradient_errors_in_checking_mode(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam({"p": p})
        p.grad = np.array([np.inf])
        with pytest.raises(FloatingPointError):
            opt.step()

    def test_non_finite_gradient_skips_step_otherwise(self):
        ad.set_checking(False)
        try:
            p = Tensor(np.array([1.0]), requires_grad=True)
            opt = Adam({"p": p})
            p.grad = np.array([np.nan])
            assert opt.step() is False
            assert p.data[0] == 1.0
        finally:
            ad.set_checking(True)

    def test_invalid_hyperparameters(self):
        with pytest.raises(ValueError):
            Adam({}, lr=0.0)


class TestCheckpoint:
    def test_round_trip_forward_bit_exact(self, tmp_path):
        net = VesselNet(NetConfig(depth=2, base_channels=4), seed=5)
        path = tmp_path / "net.vckp"
        save_checkpoint(path, net)
        loaded = load_checkpoint(path)
        x = _input(8, 8, seed=1)
        p1, _ = net.forward(x)
        p2, _ = loaded.forward(x)
        np.testing.assert_array_equal(p1.y_a.data, p2.y_a.data)
        np.testing.assert_array_equal(p1.y_v.data, p2.y_v.data)
        np.testing.assert_array_equal(p1.y_bv.data, p2.y_bv.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vckp"
        path.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        net = VesselNet(NetConfig(depth=2, base_channels=4), seed=0)
        path = tmp_path / "net.vckp"
        save_checkpoint(path, net)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestAugment:
    def _fixture(self, seed=0):
        rng = np.random.default_rng(seed)
        img = rng.random((12, 12, 3))
        l_a = (rng.random((12, 12)) < 0.3).astype(np.float64)
        l_v = ((rng.random((12, 12)) < 0.3) * (1 - l_a))
        l_bv = np.maximum(l_a, l_v)
        mask = rng.integers(0, 4, (12, 12)).astype(np.int32)
        return img, (l_a, l_v, l_bv), mask

    def test_determinism(self):
        img, labels, mask = self._fixture()
        out1 = augment(img, labels, seed=42, mask_labels=mask)
        out2 = augment(img, labels, seed=42, mask_labels=mask)
        np.testing.assert_array_equal(out1[0], out2[0])
        for a, b in zip(out1[1], out2[1]):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(out1[2], out2[2])

    def test_labels_stay_binary_and_consistent(self):
        img, labels, mask = self._fixture()
        for seed in range(20):
            _, labs, _ = augment(img, labels, seed=seed, mask_labels=mask)
            for l in labs:
                assert np.isin(l, (0.0, 1.0)).all()
            assert np.all(labs[0] <= labs[2]) and np.all(labs[1] <= labs[2])

    def test_flip_pairs_image_and_label(self):
        img, labels, mask = self._fixture()
        cfg = AugmentConfig(flip=True, intensity=False, affine=False, cutout=False)
        for seed in range(10):
            out_img, out_labs, out_mask = augment(img, labels, seed=seed,
                                                  mask_labels=mask, cfg=cfg)
            flipped = not np.array_equal(out_img, img)
            if flipped:
                np.testing.assert_array_equal(out_img, img[:, ::-1])
                np.testing.assert_array_equal(out_labs[0], labels[0][:, ::-1])
                np.testing.assert_array_equal(out_mask, mask[:, ::-1])
                break
        else:
            pytest.fail("flip never drawn in 10 seeds")

    def test_image_values_stay_in_range(self):
        img, labels, mask = self._fixture()
        for seed in range(10):
            out_img, _, _ = augment(img, labels, seed=seed, mask_labels=mask)
            assert out_img.min() >= 0.0 and out_img.max() <= 1.0


def _samples(n=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        img = rng.random((size, size, 3))
        l_a = (rng.random((size, size)) < 0.2).astype(np.float64)
        l_v = ((rng.random((size, size)) < 0.2) * (1 - l_a))
        l_bv = np.maximum(l_a, l_v)
        mask = SuperpixelMask(rng.integers(0, 4, (size, size)).astype(np.int32), 4)
        samples.append(Sample(img, (l_a, l_v, l_bv), mask))
    return samples


class TestTrain:
    def test_loss_decreases_on_single_image(self):
        samples = _samples(1)
        cfg = TrainConfig(max_epochs=50, patience=50, seed=0, dtype="float32",
                          augment=AugmentConfig(False, False, False, False))
        res = train(samples, NetConfig(depth=2, base_channels=4), cfg)
        first = res.history[0]["total"]
        last = res.history[-1]["total"]
        assert last < first

    def test_determinism_bit_exact_in_double(self, tmp_path):
        samples = _samples(3)
        cfg = TrainConfig(max_epochs=2, patience=2, seed=7)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        train(samples, NetConfig(depth=2, base_channels=4), cfg, out_dir=d1)
        train(samples, NetConfig(depth=2, base_channels=4), cfg, out_dir=d2)
        assert (d1 / "history.csv").read_bytes() == (d2 / "history.csv").read_bytes()

    def test_early_stopping_respects_patience(self):
        samples = _samples(3)
        cfg = TrainConfig(max_epochs=40, patience=2, seed=0, dtype="float32")
        res = train(samples, NetConfig(depth=2, base_channels=4), cfg)
        assert len(res.history) - 1 - res.best_epoch <= cfg.patience

    def test_best_validation_non_increasing(self):
        samples = _samples(3)
        cfg = TrainConfig(max_epochs=5, patience=5, seed=1, dtype="float32")
        res = train(samples, NetConfig(depth=2, base_channels=4), cfg)
        best = np.inf
        for row in res.history:
            best = min(best, row["val_total"])
        assert best == res.best_val

    def test_output_artifacts(self, tmp_path):
        samples = _samples(2)
        cfg = TrainConfig(max_epochs=1, patience=1, seed=0, dtype="float32")
        out = tmp_path / "run"
        train(samples, NetConfig(depth=2, base_channels=4), cfg, out_dir=out)
        assert (out / "history.csv").exists()
        assert (out / "checkpoint.vckp").exists()
        assert (out / "config.json").exists()
        header = (out / "history.csv").read_text().splitlines()[0]
        assert header == "epoch,bce,c3,intra,total,val_total,av_acc"

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train([], NetConfig(), TrainConfig())

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)

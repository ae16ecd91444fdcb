"""Gradient verification suites shared by the CLI and the acceptance tests.

Each check compares analytic gradients to central finite differences in
double precision, with inputs perturbed away from min/maxpool ties.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import (AVLabel, ContrastiveConfig, LossWeights, PredictionTriple,
                     base_bce_loss, bce, c3_loss, intra_loss, total_loss)
from .model import NetConfig, VesselNet
from .superpixel import SuperpixelMask

OP_TOL = 1e-5
LOSS_TOL = 1e-4
END2END_TOL = 1e-3


def _perturb_off_ties(rng, shape):
    """Random values with distinct entries so min/maxpool have no ties."""
    x = rng.normal(size=shape)
    return x + rng.uniform(1e-3, 2e-3, size=shape) * np.sign(rng.normal(size=shape))


def _random_label(rng, shape) -> AVLabel:
    la = rng.random(shape) < 0.3
    lv = (rng.random(shape) < 0.3) & ~la
    lbv = la | lv | (rng.random(shape) < 0.1)
    return AVLabel(Tensor(la.astype(float)), Tensor(lv.astype(float)),
                   Tensor(lbv.astype(float)))


def _op_checks(rng):
    shape = (3, 4)
    x = Tensor(_perturb_off_ties(rng, shape))
    y = Tensor(_perturb_off_ties(rng, shape))
    probs = Tensor(rng.uniform(0.05, 0.95, shape))
    img = Tensor(_perturb_off_ties(rng, (1, 2, 6, 6)))
    kern = Tensor(rng.normal(size=(3, 2, 3, 3)))
    return [
        ("add", lambda: ad.grad_check(
            lambda a, b: ad.reduce_mean(ad.add(a, b)), [x, y])),
        ("sub", lambda: ad.grad_check(
            lambda a, b: ad.reduce_mean(ad.sub(a, b)), [x, y])),
        ("mul", lambda: ad.grad_check(
            lambda a, b: ad.reduce_mean(ad.mul(a, b)), [x, y])),
        ("scalar_mul", lambda: ad.grad_check(
            lambda a: ad.reduce_mean(ad.scalar_mul(a, 2.5)), [x])),
        ("elementwise_min", lambda: ad.grad_check(
            lambda a, b: ad.reduce_mean(ad.elementwise_min(a, b)), [x, y])),
        ("relu", lambda: ad.grad_check(
            lambda a: ad.reduce_mean(ad.relu(a)), [x])),
        ("sigmoid", lambda: ad.grad_check(
            lambda a: ad.reduce_mean(ad.sigmoid(a)), [x])),
        ("log", lambda: ad.grad_check(
            lambda a: ad.reduce_mean(ad.log(a)), [probs])),
        ("exp", lambda: ad.grad_check(
            lambda a: ad.reduce_mean(ad.exp(a)), [x])),
        ("reduce_mean", lambda: ad.grad_check(
            lambda a: ad.reduce_sum(ad.reduce_mean(a, axis=1)), [x])),
        ("reduce_sum", lambda: ad.grad_check(
            lambda a: ad.reduce_mean(ad.reduce_sum(a, axis=0)), [x])),
        ("conv2d", lambda: ad.grad_check(
            lambda a, k: ad.reduce_mean(ad.conv2d(a, k, stride=1, padding=1)),
            [img, kern])),
        ("maxpool2x", lambda: ad.grad_check(
            lambda a: ad.reduce_mean(ad.maxpool2x(a)), [img])),
        ("upsample2x_nearest", lambda: ad.grad_check(
            lambda a: ad.reduce_mean(ad.upsample2x_nearest(a)), [img])),
        ("concat_channels", lambda: ad.grad_check(
            lambda a, b: ad.reduce_mean(ad.concat_channels(a, b)), [img, img])),
        ("normalize_cols", lambda: ad.grad_check(
            lambda a: ad.reduce_mean(ad.normalize_cols(a)), [x])),
        ("gather_cols", lambda: ad.grad_check(
            lambda a: ad.reduce_mean(ad.gather_cols(a, [0, 2, 2, 1])), [x])),
        ("matmul", lambda: ad.grad_check(
            lambda a, b: ad.reduce_mean(ad.matmul(a, ad.transpose2d(b))), [x, y])),
    ]


def _loss_checks(rng):
    shape = (5, 5)
    label = _random_label(rng, shape)
    probs = [Tensor(rng.uniform(0.05, 0.95, shape)) for _ in range(3)]
    feats = Tensor(rng.normal(size=(3, 4, 4)))
    mask = SuperpixelMask(rng.integers(0, 4, (4, 4)).astype(np.int32), 4)
    ccfg = ContrastiveConfig(anchors_per_image=8, positives_per_anchor=2,
                             negatives_per_anchor=4, seed=int(rng.integers(1 << 30)))
    weights = LossWeights(0.7, 0.3)

    def total(a, v, b, f):
        return total_loss(PredictionTriple(a, v, b), label, f, mask,
                          weights, ccfg)[0]

    return [
        ("bce", lambda: ad.grad_check(
            lambda y: bce(y, label.l_bv), [probs[2]])),
        ("c3_loss", lambda: ad.grad_check(
            lambda a, v, b: c3_loss(PredictionTriple(a, v, b), label), probs)),
        ("base_bce_loss", lambda: ad.grad_check(
            lambda a, v, b: base_bce_loss(PredictionTriple(a, v, b), label), probs)),
        ("intra_loss", lambda: ad.grad_check(
            lambda f: intra_loss(f, mask, ccfg)[0], [feats])),
        ("total_loss", lambda: ad.grad_check(total, probs + [feats])),
    ]


def _end2end_check(rng, n_params: int = 50):
    """Finite differences on a random subset of network parameters through
    the full forward + total loss."""
    net_cfg = NetConfig(depth=2, base_channels=4)
    net = VesselNet(net_cfg, seed=int(rng.integers(1 << 30)))
    x = rng.normal(size=(1, 3, 8, 8))
    label = _random_label(rng, (8, 8))
    mask = SuperpixelMask(rng.integers(0, 3, (4, 4)).astype(np.int32), 3)
    ccfg = ContrastiveConfig(anchors_per_image=6, positives_per_anchor=2,
                             negatives_per_anchor=4, seed=7)
    weights = LossWeights(1.0, 0.1)

    def loss_value():
        pred, bottleneck = net.forward(Tensor(x))
        return total_loss(pred, label, bottleneck, mask, weights, ccfg)[0]

    net.zero_grad()
    loss = loss_value()
    ad.backward(loss)
    flat_names = [(k, i) for k, p in sorted(net.params.items())
                  for i in range(p.data.size)]
    picks = rng.choice(len(flat_names), size=min(n_params, len(flat_names)),
                       replace=False)
    step = 1e-5
    max_err = 0.0
    for pi in picks:
        name, idx = flat_names[pi]
        p = net.params[name]
        analytic = p.grad.reshape(-1)[idx] if p.grad is not None else 0.0
        orig = p.data.reshape(-1)[idx]
        p.data.reshape(-1)[idx] = orig + step
        fp = loss_value().item()
        p.data.reshape(-1)[idx] = orig - step
        fm = loss_value().item()
        p.data.reshape(-1)[idx] = orig
        numeric = (fp - fm) / (2 * step)
        denom = max(abs(analytic), abs(numeric), 1e-3)
        max_err = max(max_err, abs(analytic - numeric) / denom)
    return max_err


def run_suite(scope: str = "ops", seeds: int = 5, corrupt: bool = False):
    """Returns [(check_name, max_rel_err, tol)]; corrupt=True sabotages the
    min backward rule to prove the harness catches wrong gradients."""
    results = []
    orig_min = ad.elementwise_min
    if corrupt:
        def bad_min(a, b):
            out = orig_min(a, b)
            inner = out._backward
            out._backward = (lambda g: inner(g * 0.5)) if inner else None
            return out
        ad.elementwise_min = bad_min
    try:
        if scope in ("ops", "losses"):
            checks_fn = _op_checks if scope == "ops" else _loss_checks
            tol = OP_TOL if scope == "ops" else LOSS_TOL
            names = [n for n, _ in checks_fn(np.random.default_rng(0))]
            worst = {n: 0.0 for n in names}
            for s in range(seeds):
                rng = np.random.default_rng(1000 + s)
                for name, check in checks_fn(rng):
                    worst[name] = max(worst[name], check()["max_rel_err"])
            results = [(n, worst[n], tol) for n in names]
        elif scope == "end2end":
            worst = 0.0
            for s in range(seeds):
                worst = max(worst, _end2end_check(np.random.default_rng(2000 + s)))
            results = [("end2end", worst, END2END_TOL)]
        else:
            raise ValueError(f"unknown scope {scope}")
    finally:
        ad.elementwise_min = orig_min
    return results

"""Desk-scale training loop: Adam, batch size 1, online augmentation,
early stopping on validation loss, per-epoch history.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetEntry, load_entry, preprocess
from .losses import (AVLabel, ContrastiveConfig, LossWeights, PredictionTriple,
                     total_loss)
from .metrics import aggregate_reports, av_classification_metrics
from .model import NetConfig, VesselNet, save_checkpoint
from .optim import Adam
from .superpixel import SlicConfig, SuperpixelMask, downsample_mask, slic_segment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    intensity: bool = True
    affine: bool = True
    cutout: bool = True


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    patience: int = 200
    max_epochs: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    slic: SlicConfig = field(default_factory=SlicConfig)
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dtype: str = "float64"  # float32 allowed on the training fast path
    local_contrast: bool = True
    vessel_anchors: bool = False
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.lr <= 0 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("invalid training config")


@dataclass
class Sample:
    rgb01: np.ndarray          # [H, W, 3] floats in [0, 1]
    labels: tuple              # (l_a, l_v, l_bv) binary float maps
    mask: SuperpixelMask | None


def augment(rgb01: np.ndarray, labels: tuple, seed: int,
            mask_labels: np.ndarray | None = None,
            cfg: AugmentConfig = AugmentConfig()):
    """Seeded paired augmentation.

    Horizontal flip (p=0.5) applies to image, labels and mask alike;
    intensity scale/shift and cutout touch the image only; the affine warp
    (rotation <= 15 deg, translation <= 5%) uses bilinear interpolation for
    the image and nearest-neighbor for labels and mask, keeping labels
    binary.
    """
    rng = np.random.default_rng(seed)
    img = rgb01.copy()
    labs = [l.copy() for l in labels]
    mask = None if mask_labels is None else mask_labels.copy()
    h, w = img.shape[:2]

    if cfg.flip and rng.random() < 0.5:
        img = img[:, ::-1].copy()
        labs = [l[:, ::-1].copy() for l in labs]
        if mask is not None:
            mask = mask[:, ::-1].copy()

    if cfg.intensity:
        scale = rng.uniform(0.9, 1.1)
        shift = rng.uniform(-0.05, 0.05)
        img = np.clip(img * scale + shift, 0.0, 1.0)

    if cfg.affine:
        angle = math.radians(rng.uniform(-15.0, 15.0))
        ty = rng.uniform(-0.05, 0.05) * h
        tx = rng.uniform(-0.05, 0.05) * w
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        # output coord o maps to input rot^T @ (o - center - t) + center
        matrix = rot.T
        offset = center - matrix @ (center + np.array([ty, tx]))
        for ch in range(3):
            img[..., ch] = ndimage.affine_transform(
                img[..., ch], matrix, offset=offset, order=1, mode="nearest")
        labs = [ndimage.affine_transform(l, matrix, offset=offset, order=0,
                                         mode="constant", cval=0.0)
                for l in labs]
        if mask is not None:
            mask = ndimage.affine_transform(mask, matrix, offset=offset,
                                            order=0, mode="nearest")

    if cfg.cutout:
        side = int(rng.integers(1, max(2, int(0.1 * w)) + 1))
        y0 = int(rng.integers(0, h - side + 1))
        x0 = int(rng.integers(0, w - side + 1))
        img[y0:y0 + side, x0:x0 + side] = 0.0

    # affine can break the subset invariant only through resampling of an
    # inconsistent source; re-derive the vessel bit to stay valid
    labs[2] = np.maximum(labs[2], np.maximum(labs[0], labs[1]))
    return img, tuple(labs), mask


def prepare_samples(entries: list[DatasetEntry], slic_cfg: SlicConfig,
                    with_masks: bool = True) -> list[Sample]:
    """Load entries and precompute superpixel masks once per image."""
    samples = []
    for e in entries:
        img, labels, _fov = load_entry(e)
        rgb01 = img.astype(np.float64) / 255.0
        mask = slic_segment(img, slic_cfg) if with_masks else None
        samples.append(Sample(rgb01=rgb01, labels=labels, mask=mask))
    return samples


def _block_max(arr: np.ndarray, th: int, tw: int) -> np.ndarray:
    h, w = arr.shape
    rb = [int(round(i * h / th)) for i in range(th + 1)]
    cb = [int(round(j * w / tw)) for j in range(tw + 1)]
    out = np.zeros((th, tw), dtype=arr.dtype)
    for i in range(th):
        for j in range(tw):
            out[i, j] = arr[rb[i]:max(rb[i + 1], rb[i] + 1),
                            cb[j]:max(cb[j + 1], cb[j] + 1)].max()
    return out


def _forward_loss(net: VesselNet, sample_img01, labels, mask, cfg: TrainConfig,
                  step_seed: int):
    dtype = np.dtype(cfg.dtype)
    x = preprocess((sample_img01 * 255.0), local_contrast=cfg.local_contrast)
    xt = Tensor(x[None].astype(dtype))
    label = AVLabel(Tensor(labels[0].astype(dtype)),
                    Tensor(labels[1].astype(dtype)),
                    Tensor(labels[2].astype(dtype)))
    pred, bottleneck = net.forward(xt)
    features, small_mask, vessel_mask = None, None, None
    if mask is not None:
        _, bh, bw = bottleneck.data.shape
        small_mask = downsample_mask(mask, bh, bw)
        features = bottleneck
        if cfg.vessel_anchors:
            vessel_mask = _block_max(labels[2], bh, bw) > 0.5
    ccfg = ContrastiveConfig(**{**asdict(cfg.contrastive), "seed": step_seed})
    loss, breakdown = total_loss(pred, label, features, small_mask,
                                 cfg.weights, ccfg, vessel_mask)
    return loss, breakdown, pred, label


@dataclass
class TrainResult:
    net: VesselNet
    history: list
    best_epoch: int
    best_val: float


HISTORY_FIELDS = ["epoch", "bce", "c3", "intra", "total", "val_total", "av_acc"]


def train(entries_or_samples, net_cfg: NetConfig, cfg: TrainConfig,
          out_dir=None) -> TrainResult:
    """Run the full protocol: shuffled single-image Adam steps, validation
    total loss for early stopping, best-checkpoint return.

    ``entries_or_samples`` is either a list of DatasetEntry (train split
    used, loaded and SLIC-precomputed here) or prepared Sample objects.
    """
    if entries_or_samples and isinstance(entries_or_samples[0], DatasetEntry):
        train_entries = [e for e in entries_or_samples if e.split == "train"]
        samples = prepare_samples(train_entries, cfg.slic)
    else:
        samples = list(entries_or_samples)
    if not samples:
        raise ValueError("empty dataset")

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(samples))
    n_val = max(1, int(round(cfg.val_fraction * len(samples)))) if len(samples) > 1 else 0
    val_idx = order[:n_val]
    train_idx = order[n_val:] if n_val else order
    train_samples = [samples[i] for i in train_idx]
    val_samples = [samples[i] for i in val_idx]

    prev_checking = ad.checking()
    if cfg.dtype == "float32":
        ad.set_checking(False)
    try:
        net = VesselNet(net_cfg, seed=cfg.seed, dtype=np.dtype(cfg.dtype))
        opt = Adam(net.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                   eps=cfg.adam_eps)
        history = []
        best_val = math.inf
        best_epoch = -1
        best_params = None
        step = 0
        for epoch in range(cfg.max_epochs):
            perm = rng.permutation(len(train_samples))
            sums = {"bce": 0.0, "c3": 0.0, "intra": 0.0, "total": 0.0}
            for si in perm:
                s = train_samples[si]
                aug_seed = int(rng.integers(0, 2 ** 31))
                img01, labels, mlab = augment(
                    s.rgb01, s.labels, aug_seed,
                    None if s.mask is None else s.mask.labels, cfg.augment)
                mask = None
                if mlab is not None:
                    mask = SuperpixelMask(mlab, int(mlab.max()) + 1)
                net.zero_grad()
                loss, breakdown, _, _ = _forward_loss(
                    net, img01, labels, mask, cfg, step_seed=cfg.contrastive.seed + step)
                if not np.isfinite(loss.item()):
                    if ad.checking():
                        raise FloatingPointError("non-finite training loss")
                    log.warning("skipping step %d: non-finite loss", step)
                    step += 1
                    continue
                ad.backward(loss)
                opt.step()
                step += 1
                for k in sums:
                    sums[k] += getattr(breakdown, k)
            n_steps = max(1, len(perm))
            row = {k: sums[k] / n_steps for k in sums}
            row["epoch"] = epoch

            if val_samples:
                val_tot, reports = 0.0, []
                for s in val_samples:
                    loss, _, pred, label = _forward_loss(
                        net, s.rgb01, s.labels, s.mask, cfg,
                        step_seed=cfg.contrastive.seed)
                    val_tot += loss.item()
                    reports.append(av_classification_metrics(pred, label))
                row["val_total"] = val_tot / len(val_samples)
                agg = aggregate_reports(reports)
                row["av_acc"] = agg.accuracy if agg.accuracy is not None else float("nan")
            else:
                row["val_total"] = row["total"]
                row["av_acc"] = float("nan")
            history.append(row)

            if row["val_total"] < best_val:
                best_val = row["val_total"]
                best_epoch = epoch
                best_params = {k: p.data.copy() for k, p in net.params.items()}
            if epoch - best_epoch >= cfg.patience:
                break

        if best_params is not None:
            for k, p in net.params.items():
                p.data = best_params[k]
    finally:
        ad.set_checking(prev_checking)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_history(out_dir / "history.csv", history)
        save_checkpoint(out_dir / "checkpoint.vckp", net)
        snapshot = {"net_config": asdict(net_cfg), "train_config": asdict(cfg)}
        (out_dir / "config.json").write_text(json.dumps(snapshot, indent=2))
    return TrainResult(net=net, history=history, best_epoch=best_epoch,
                       best_val=best_val)


def write_history(path, history: list) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in HISTORY_FIELDS})


def evaluate_samples(net: VesselNet, samples: list[Sample], cfg: TrainConfig):
    """A/V classification reports for a list of samples (no augmentation)."""
    reports = []
    for s in samples:
        _, _, pred, label = _forward_loss(net, s.rgb01, s.labels, None, cfg,
                                          step_seed=cfg.contrastive.seed)
        reports.append(av_classification_metrics(pred, label))
    return reports

"""The loss stack: per-channel BCE, the channel-coupled fusion map and its
consistency loss, the superpixel-guided intra-image contrastive
regularizer, and the weighted total.

The fusion map couples the artery, vein and vessel prediction channels
through pointwise minima selected by the ground-truth class of each pixel
(artery / vein / crossing / uncertain-or-background), so that e.g. a pixel
labeled artery is penalized unless it is predicted both artery and vessel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .superpixel import SuperpixelMask

LOG_CLAMP_EPS = 1e-7


@dataclass
class PredictionTriple:
    """Post-sigmoid probability maps for artery, vein and blood vessel."""
    y_a: Tensor
    y_v: Tensor
    y_bv: Tensor

    def __post_init__(self):
        if not (self.y_a.shape == self.y_v.shape == self.y_bv.shape):
            raise ValueError("prediction channels must share a shape")


@dataclass
class AVLabel:
    """Binary ground truth for artery, vein and vessel.

    Arteries and veins are subsets of the vessel map; derived classes:
    artery (1,0), vein (0,1), crossing (1,1), uncertain (0,0 with vessel=1).
    """
    l_a: Tensor
    l_v: Tensor
    l_bv: Tensor

    def __post_init__(self):
        if not (self.l_a.shape == self.l_v.shape == self.l_bv.shape):
            raise ValueError("label channels must share a shape")
        if ad.checking():
            a, v, bv = self.l_a.data, self.l_v.data, self.l_bv.data
            for name, arr in (("l_a", a), ("l_v", v), ("l_bv", bv)):
                if not np.isin(arr, (0.0, 1.0)).all():
                    raise ValueError(f"{name} is not binary")
            if np.any(a > bv) or np.any(v > bv):
                raise ValueError("artery/vein labels must be subsets of the vessel label")

    def class_masks(self):
        """Float masks (artery, vein, crossing, uncertain_or_bg)."""
        a = self.l_a.data > 0.5
        v = self.l_v.data > 0.5
        return ((a & ~v).astype(self.l_a.dtype),
                (~a & v).astype(self.l_a.dtype),
                (a & v).astype(self.l_a.dtype),
                (~a & ~v).astype(self.l_a.dtype))


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1

    def __post_init__(self):
        if not (np.isfinite(self.lambda1) and np.isfinite(self.lambda2)):
            raise ValueError("loss weights must be finite")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    anchors_per_image: int = 256
    positives_per_anchor: int = 4
    negatives_per_anchor: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if min(self.anchors_per_image, self.positives_per_anchor,
               self.negatives_per_anchor) < 1:
            raise ValueError("sampling counts must be >= 1")


def bce(y: Tensor, l: Tensor) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to
    [eps, 1-eps] before the logs."""
    if y.shape != l.shape:
        raise ValueError("bce: shape mismatch")
    yc = ad.clamp(y, LOG_CLAMP_EPS, 1.0 - LOG_CLAMP_EPS)
    term = ad.add(ad.mul(l, ad.log(yc)),
                  ad.mul(ad.sub(1.0, l), ad.log(ad.sub(1.0, yc))))
    return ad.scalar_mul(ad.reduce_mean(term), -1.0)


def c3_fuse(pred: PredictionTriple, label: AVLabel) -> Tensor:
    """Channel-coupled fusion map.

    artery pixels -> min(y_a, y_bv); vein -> min(y_v, y_bv);
    crossing -> min(y_a, y_v, y_bv); uncertain/background -> y_bv.
    Built from differentiable minima so gradients reach all channels.
    """
    if pred.y_a.shape != label.l_a.shape:
        raise ValueError("c3_fuse: prediction/label shape mismatch")
    m_art, m_vein, m_cross, m_rest = (Tensor(m) for m in label.class_masks())
    min_ab = ad.elementwise_min(pred.y_a, pred.y_bv)
    min_vb = ad.elementwise_min(pred.y_v, pred.y_bv)
    min_avb = ad.elementwise_min(pred.y_a, min_vb)
    return ad.add(ad.add(ad.mul(m_art, min_ab), ad.mul(m_vein, min_vb)),
                  ad.add(ad.mul(m_cross, min_avb), ad.mul(m_rest, pred.y_bv)))


def c3_loss(pred: PredictionTriple, label: AVLabel) -> Tensor:
    """BCE between the fused map and the vessel label."""
    return bce(c3_fuse(pred, label), label.l_bv)


def base_bce_loss(pred: PredictionTriple, label: AVLabel) -> Tensor:
    """Equal-weight mean of the three per-channel BCE losses."""
    s = ad.add(ad.add(bce(pred.y_a, label.l_a), bce(pred.y_v, label.l_v)),
               bce(pred.y_bv, label.l_bv))
    return ad.scalar_mul(s, 1.0 / 3.0)


@dataclass
class IntraInfo:
    n_anchors: int
    degenerate: bool  # True when no anchor had both a positive and a negative


def sample_contrastive_pairs(labels_flat: np.ndarray, cfg: ContrastiveConfig,
                             eligible_mask: np.ndarray | None = None):
    """Seeded anchor/positive/negative index sampling over flat positions.

    Sampling depends only on the partition structure (which positions share
    a cluster), never on cluster id values, so any relabeling bijection
    yields identical draws.
    """
    rng = np.random.default_rng(cfg.seed)
    n = labels_flat.size
    _, inv, counts = np.unique(labels_flat, return_inverse=True,
                               return_counts=True)
    cluster_size = counts[inv]
    # anchors need >= 1 positive and >= 1 negative
    ok = (cluster_size >= 2) & (cluster_size < n)
    if eligible_mask is not None:
        ok &= eligible_mask.reshape(-1).astype(bool)
    candidates = np.arange(n)[ok]
    if candidates.size == 0:
        return None
    n_anchors = min(cfg.anchors_per_image, candidates.size)
    anchors = np.sort(rng.choice(candidates, size=n_anchors, replace=False))
    pos_idx = np.empty((n_anchors, cfg.positives_per_anchor), dtype=np.int64)
    neg_idx = np.empty((n_anchors, cfg.negatives_per_anchor), dtype=np.int64)
    all_pos = np.arange(n)
    for i, a in enumerate(anchors):
        same = all_pos[labels_flat == labels_flat[a]]
        same = same[same != a]
        other = all_pos[labels_flat != labels_flat[a]]
        pos_idx[i] = rng.choice(same, size=cfg.positives_per_anchor,
                                replace=same.size < cfg.positives_per_anchor)
        neg_idx[i] = rng.choice(other, size=cfg.negatives_per_anchor,
                                replace=other.size < cfg.negatives_per_anchor)
    return anchors, pos_idx, neg_idx


def intra_loss(features: Tensor, mask: SuperpixelMask, cfg: ContrastiveConfig,
               vessel_mask: np.ndarray | None = None) -> tuple[Tensor, IntraInfo]:
    """Superpixel-guided intra-image contrastive loss.

    Feature columns are L2-normalized; similarities are dot products scaled
    by 1/temperature; per anchor the loss is
    -log(sum_pos exp(s+) / (sum_pos exp(s+) + sum_neg exp(s-))),
    averaged over anchors.  Positives share the anchor's superpixel cluster,
    negatives do not.  Degenerate masks (a single cluster, or no usable
    anchor) yield a zero loss flagged in the returned info.
    """
    if features.data.ndim != 3:
        raise ValueError("features must be [C, h, w]")
    c_f, h, w = features.data.shape
    if (h, w) != mask.labels.shape:
        raise ValueError("mask spatial dims must equal feature spatial dims")
    labels_flat = mask.labels.reshape(-1)
    sampled = sample_contrastive_pairs(labels_flat, cfg, vessel_mask)
    if sampled is None:
        return Tensor(np.zeros(())), IntraInfo(n_anchors=0, degenerate=True)
    anchors, pos_idx, neg_idx = sampled
    n_a = anchors.size
    n_p, n_n = cfg.positives_per_anchor, cfg.negatives_per_anchor

    fn = ad.normalize_cols(ad.reshape(features, (c_f, h * w)))

    def sims(other_idx, k):
        anch = ad.gather_cols(fn, np.repeat(anchors, k))
        other = ad.gather_cols(fn, other_idx.reshape(-1))
        s = ad.reduce_sum(ad.mul(anch, other), axis=0)
        return ad.reshape(ad.scalar_mul(s, 1.0 / cfg.temperature), (n_a, k))

    sum_pos = ad.reduce_sum(ad.exp(sims(pos_idx, n_p)), axis=1)
    sum_neg = ad.reduce_sum(ad.exp(sims(neg_idx, n_n)), axis=1)
    per_anchor = ad.sub(ad.log(ad.add(sum_pos, sum_neg)), ad.log(sum_pos))
    return ad.reduce_mean(per_anchor), IntraInfo(n_anchors=n_a, degenerate=False)


@dataclass
class LossBreakdown:
    bce: float
    c3: float
    intra: float
    total: float
    intra_info: IntraInfo | None = None

    def as_dict(self) -> dict:
        return {"bce": self.bce, "c3": self.c3, "intra": self.intra,
                "total": self.total}


def total_loss(pred: PredictionTriple, label: AVLabel,
               features: Tensor | None, mask: SuperpixelMask | None,
               weights: LossWeights, cfg: ContrastiveConfig,
               vessel_mask: np.ndarray | None = None) -> tuple[Tensor, LossBreakdown]:
    """base BCE + lambda1 * consistency + lambda2 * contrastive.

    Zero-weight terms are still evaluated for the breakdown but never added,
    so lambda1 = lambda2 = 0 reproduces the plain BCE baseline bit-exactly.
    """
    base = base_bce_loss(pred, label)
    c3 = c3_loss(pred, label)
    if features is not None and mask is not None:
        intra, info = intra_loss(features, mask, cfg, vessel_mask)
    else:
        intra, info = Tensor(np.zeros(())), IntraInfo(0, True)
    total = base
    if weights.lambda1 != 0.0:
        total = ad.add(total, ad.scalar_mul(c3, weights.lambda1))
    if weights.lambda2 != 0.0 and not info.degenerate:
        total = ad.add(total, ad.scalar_mul(intra, weights.lambda2))
    breakdown = LossBreakdown(bce=base.item(), c3=c3.item(), intra=intra.item(),
                              total=total.item(), intra_info=info)
    return total, breakdown

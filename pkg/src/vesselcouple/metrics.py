"""Evaluation metrics: sensitivity, specificity, accuracy, F1, mIoU and
AUROC under the artery/vein classification and vessel segmentation
protocols.

A/V protocol: evaluation restricted to ground-truth pixels labeled exactly
artery or exactly vein (crossing/uncertain excluded); a pixel is predicted
artery iff y_a > y_v (ties to vein); artery is the positive class.
BV protocol: all pixels inside the FOV, vessel probability thresholded at
0.5, vessel positive, AUROC on the raw probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


@dataclass
class MetricReport:
    """Six-metric report; any metric with a zero denominator is None."""
    sensitivity: float | None
    specificity: float | None
    accuracy: float | None
    f1: float | None
    miou: float | None
    auroc: float | None
    evaluated_pixels: int
    protocol: str  # "AV" or "BV"
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)

    def as_dict(self) -> dict:
        return {
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "miou": self.miou,
            "auroc": self.auroc,
            "evaluated_pixels": self.evaluated_pixels,
            "protocol": self.protocol,
        }


def _safe_div(num, den):
    return num / den if den > 0 else None


def auroc(scores, labels) -> float | None:
    """Mann-Whitney AUROC via rank sums: (concordant + 0.5 * tied) / (P*N).

    Returns None when either class is absent.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        return None
    ranks = _average_ranks(scores)
    rank_sum_pos = ranks[labels].sum()
    u = rank_sum_pos - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged, O(n log n)."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def confusion(pred_pos: np.ndarray, true_pos: np.ndarray) -> ConfusionCounts:
    pred_pos = np.asarray(pred_pos, dtype=bool).reshape(-1)
    true_pos = np.asarray(true_pos, dtype=bool).reshape(-1)
    return ConfusionCounts(
        tp=int(np.sum(pred_pos & true_pos)),
        fp=int(np.sum(pred_pos & ~true_pos)),
        tn=int(np.sum(~pred_pos & ~true_pos)),
        fn=int(np.sum(~pred_pos & true_pos)),
    )


def report_from_counts(c: ConfusionCounts, miou, auc, protocol: str) -> MetricReport:
    return MetricReport(
        sensitivity=_safe_div(c.tp, c.tp + c.fn),
        specificity=_safe_div(c.tn, c.tn + c.fp),
        accuracy=_safe_div(c.tp + c.tn, c.total),
        f1=_safe_div(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        miou=miou,
        auroc=auc,
        evaluated_pixels=c.total,
        protocol=protocol,
        counts=c,
    )


def av_classification_metrics(pred, label, include_crossing: bool = False) -> MetricReport:
    """A/V classification metrics.

    ``pred`` carries y_a / y_v probability maps, ``label`` the binary
    l_a / l_v / l_bv maps (see losses.PredictionTriple / losses.AVLabel).
    With include_crossing=True, crossing pixels count as correct for either
    prediction (sensitivity-analysis mode).
    """
    y_a = np.asarray(pred.y_a.data if hasattr(pred.y_a, "data") else pred.y_a)
    y_v = np.asarray(pred.y_v.data if hasattr(pred.y_v, "data") else pred.y_v)
    l_a = np.asarray(label.l_a.data if hasattr(label.l_a, "data") else label.l_a) > 0.5
    l_v = np.asarray(label.l_v.data if hasattr(label.l_v, "data") else label.l_v) > 0.5

    pure_a = l_a & ~l_v
    pure_v = l_v & ~l_a
    eval_mask = pure_a | pure_v
    pred_a = y_a > y_v  # ties -> vein

    if include_crossing:
        crossing = l_a & l_v
        # either prediction is correct on crossings: count toward the
        # predicted class as a true positive/negative
        extra_tp = int(np.sum(crossing & pred_a))
        extra_tn = int(np.sum(crossing & ~pred_a))
    else:
        extra_tp = extra_tn = 0

    if not eval_mask.any() and extra_tp + extra_tn == 0:
        return MetricReport(None, None, None, None, None, None, 0, "AV")

    c = confusion(pred_a[eval_mask], pure_a[eval_mask])
    c.tp += extra_tp
    c.tn += extra_tn

    # mIoU over artery and vein on the evaluation set
    iou_a = _safe_div(c.tp, c.tp + c.fp + c.fn)
    iou_v = _safe_div(c.tn, c.tn + c.fn + c.fp)
    miou = None if iou_a is None or iou_v is None else (iou_a + iou_v) / 2.0

    scores = (y_a - y_v)[eval_mask]
    auc = auroc(scores, pure_a[eval_mask])
    return report_from_counts(c, miou, auc, "AV")


def bv_segmentation_metrics(y_bv, l_bv, fov=None, threshold: float = 0.5) -> MetricReport:
    """Vessel segmentation metrics over the FOV (full frame if fov is None)."""
    y = np.asarray(y_bv.data if hasattr(y_bv, "data") else y_bv, dtype=np.float64)
    l = np.asarray(l_bv.data if hasattr(l_bv, "data") else l_bv) > 0.5
    if y.shape != l.shape:
        raise ValueError("shape mismatch between prediction and label")
    if fov is not None:
        mask = np.asarray(fov) > 0.5
        y, l = y[mask], l[mask]
    y, l = y.reshape(-1), l.reshape(-1)
    if y.size == 0:
        return MetricReport(None, None, None, None, None, None, 0, "BV")
    pred = y > threshold
    c = confusion(pred, l)
    iou_fg = _safe_div(c.tp, c.tp + c.fp + c.fn)
    iou_bg = _safe_div(c.tn, c.tn + c.fn + c.fp)
    miou = None if iou_fg is None or iou_bg is None else (iou_fg + iou_bg) / 2.0
    return report_from_counts(c, miou, auroc(y, l), "BV")


def aggregate_reports(reports: list[MetricReport], macro: bool = False) -> MetricReport:
    """Dataset aggregate: micro-average (fold of confusion counts, default)
    or macro-average (mean of per-image metrics, None-skipping)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    protocol = reports[0].protocol
    if macro:
        def mean_of(attr):
            vals = [getattr(r, attr) for r in reports if getattr(r, attr) is not None]
            return float(np.mean(vals)) if vals else None

        return MetricReport(
            sensitivity=mean_of("sensitivity"), specificity=mean_of("specificity"),
            accuracy=mean_of("accuracy"), f1=mean_of("f1"),
            miou=mean_of("miou"), auroc=mean_of("auroc"),
            evaluated_pixels=sum(r.evaluated_pixels for r in reports),
            protocol=protocol,
        )
    total = ConfusionCounts()
    for r in reports:
        total = total + r.counts
    miou_vals = [r.miou for r in reports if r.miou is not None]
    auc_vals = [r.auroc for r in reports if r.auroc is not None]
    return report_from_counts(
        total,
        float(np.mean(miou_vals)) if miou_vals else None,
        float(np.mean(auc_vals)) if auc_vals else None,
        protocol,
    )

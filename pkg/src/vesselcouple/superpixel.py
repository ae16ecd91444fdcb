"""SLIC superpixel segmentation and mask downsampling.

Localized k-means in combined CIELAB/spatial space with a compactness
weight, grid initialization with gradient-based seed perturbation, and a
connectivity pass that absorbs orphan regions into their dominant
neighboring cluster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

# sRGB -> XYZ (D65)
_RGB2XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])


@dataclass(frozen=True)
class SlicConfig:
    k: int = 20
    m: float = 10.0
    max_iters: int = 10
    min_region_ratio: float = 0.25

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.m <= 0:
            raise ValueError("compactness m must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.min_region_ratio < 1:
            raise ValueError("min_region_ratio must be in (0, 1)")


@dataclass
class SuperpixelMask:
    labels: np.ndarray  # int32 [H, W], values in [0, n_clusters)
    n_clusters: int

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """Convert an 8-bit sRGB image [H,W,3] to CIELAB (D65 white point)."""
    rgb = np.asarray(img, dtype=np.float64) / 255.0
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB2XYZ.T
    t = xyz / _WHITE_D65
    delta = 6.0 / 29.0
    f = np.where(t > delta ** 3, np.cbrt(t), t / (3 * delta ** 2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _lab_gradient(lab: np.ndarray) -> np.ndarray:
    """Squared Lab difference of horizontal + vertical neighbors per pixel."""
    h, w, _ = lab.shape
    yp = np.clip(np.arange(h) + 1, 0, h - 1)
    ym = np.clip(np.arange(h) - 1, 0, h - 1)
    xp = np.clip(np.arange(w) + 1, 0, w - 1)
    xm = np.clip(np.arange(w) - 1, 0, w - 1)
    gx = lab[:, xp, :] - lab[:, xm, :]
    gy = lab[yp, :, :] - lab[ym, :, :]
    return (gx ** 2).sum(axis=-1) + (gy ** 2).sum(axis=-1)


def _init_centers(lab: np.ndarray, k: int) -> np.ndarray:
    """Grid seeds at block centers, perturbed to the strictly lowest-gradient
    pixel in a 3x3 neighborhood.  Returns [n, 5] rows (y, x, L, a, b)."""
    h, w, _ = lab.shape
    n_cols = max(1, math.ceil(math.sqrt(k * w / h)))
    n_rows = max(1, round(k / n_cols))
    grad = _lab_gradient(lab)
    centers = []
    for i in range(n_rows):
        for j in range(n_cols):
            cy = (i + 0.5) * h / n_rows - 0.5
            cx = (j + 0.5) * w / n_cols - 0.5
            py, px = int(round(cy)), int(round(cx))
            py, px = min(max(py, 0), h - 1), min(max(px, 0), w - 1)
            best = (grad[py, px], py, px)
            moved = False
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    ny, nx = py + dy, px + dx
                    if 0 <= ny < h and 0 <= nx < w and grad[ny, nx] < best[0]:
                        best = (grad[ny, nx], ny, nx)
                        moved = True
            if moved:
                cy, cx = float(best[1]), float(best[2])
                py, px = best[1], best[2]
            centers.append([cy, cx, *lab[py, px]])
    return np.array(centers, dtype=np.float64)


def _assign(lab, centers, s, m):
    h, w, _ = lab.shape
    labels = np.full((h, w), -1, dtype=np.int32)
    best = np.full((h, w), np.inf)
    win = int(math.ceil(2 * s))
    inv_s2 = (m * m) / (s * s)
    ys = np.arange(h)
    xs = np.arange(w)
    for ci, (cy, cx, cl, ca, cb) in enumerate(centers):
        y0 = max(0, int(math.floor(cy)) - win)
        y1 = min(h, int(math.ceil(cy)) + win + 1)
        x0 = max(0, int(math.floor(cx)) - win)
        x1 = min(w, int(math.ceil(cx)) + win + 1)
        sub = lab[y0:y1, x0:x1]
        dc2 = ((sub - np.array([cl, ca, cb])) ** 2).sum(axis=-1)
        dy = (ys[y0:y1, None] - cy) ** 2
        dx = (xs[None, x0:x1] - cx) ** 2
        d2 = dc2 + (dy + dx) * inv_s2
        region = best[y0:y1, x0:x1]
        upd = d2 < region
        labels[y0:y1, x0:x1][upd] = ci
        region[upd] = d2[upd]
    if np.any(labels < 0):
        # window missed some pixels (extreme aspect ratios): brute force
        miss = np.argwhere(labels < 0)
        for y, x in miss:
            dc2 = ((centers[:, 2:] - lab[y, x]) ** 2).sum(axis=-1)
            d2 = dc2 + ((centers[:, 0] - y) ** 2 + (centers[:, 1] - x) ** 2) * inv_s2
            labels[y, x] = int(np.argmin(d2))
    return labels


def _enforce_connectivity(labels: np.ndarray, min_size: float) -> np.ndarray:
    """Absorb orphan regions (non-largest per cluster, or below min_size)
    into the neighboring cluster with the longest shared boundary.  Repeats
    until every cluster is a single 4-connected region."""
    labels = labels.copy()
    first_pass = True
    while True:
        orphans = []
        for cid in np.unique(labels):
            comp, n = ndimage.label(labels == cid, structure=_FOUR_CONN)
            if n == 1 and not first_pass:
                continue
            sizes = ndimage.sum_labels(np.ones_like(comp), comp, range(1, n + 1))
            keeper = int(np.argmax(sizes)) + 1
            for r in range(1, n + 1):
                if r != keeper:
                    orphans.append(np.argwhere(comp == r))
                elif first_pass and sizes[r - 1] < min_size and len(np.unique(labels)) > 1:
                    orphans.append(np.argwhere(comp == r))
        if not orphans:
            break
        for pix in orphans:
            target = _dominant_neighbor(labels, pix)
            if target is not None:
                labels[pix[:, 0], pix[:, 1]] = target
        first_pass = False
    # compact ids, preserving relative order
    uniq, inv = np.unique(labels, return_inverse=True)
    return inv.reshape(labels.shape).astype(np.int32)


def _dominant_neighbor(labels, pix):
    h, w = labels.shape
    own = labels[pix[0, 0], pix[0, 1]]
    counts: dict[int, int] = {}
    in_comp = np.zeros((h, w), dtype=bool)
    in_comp[pix[:, 0], pix[:, 1]] = True
    for y, x in pix:
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and not in_comp[ny, nx]:
                lbl = int(labels[ny, nx])
                if lbl != own:
                    counts[lbl] = counts.get(lbl, 0) + 1
    if not counts:
        return None
    best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
    return best[0]


def slic_segment(img: np.ndarray, cfg: SlicConfig, seed: int = 0) -> SuperpixelMask:
    """Segment an RGB image into ~cfg.k superpixels.

    Deterministic given (img, cfg, seed); the algorithm itself draws no
    random numbers, the seed is part of the caching contract.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an RGB image [H, W, 3]")
    h, w = img.shape[:2]
    n = h * w
    if cfg.k > n:
        raise ValueError(f"k={cfg.k} exceeds pixel count {n}")
    lab = rgb_to_lab(img)
    centers = _init_centers(lab, cfg.k)
    s = math.sqrt(n / cfg.k)
    labels = None
    for _ in range(cfg.max_iters):
        labels = _assign(lab, centers, s, cfg.m)
        new_centers = centers.copy()
        for ci in range(len(centers)):
            mask = labels == ci
            if not mask.any():
                continue
            ys, xs = np.nonzero(mask)
            new_centers[ci, 0] = ys.mean()
            new_centers[ci, 1] = xs.mean()
            new_centers[ci, 2:] = lab[mask].mean(axis=0)
        move = np.sqrt(((new_centers[:, :2] - centers[:, :2]) ** 2).sum(axis=1)).max()
        centers = new_centers
        if move < 0.5:
            labels = _assign(lab, centers, s, cfg.m)
            break
    min_size = cfg.min_region_ratio * n / len(centers)
    labels = _enforce_connectivity(labels, min_size)
    return SuperpixelMask(labels=labels, n_clusters=int(labels.max()) + 1)


def downsample_mask(mask: SuperpixelMask, target_h: int, target_w: int) -> SuperpixelMask:
    """Majority-vote downsampling to (target_h, target_w).

    Each target cell takes the majority label over its source block
    (block boundaries by integer rounding); ties break to the smallest
    label; ids are re-compacted.  Connectivity is not re-enforced.
    """
    if target_h <= 0 or target_w <= 0:
        raise ValueError("target dims must be positive")
    h, w = mask.labels.shape
    if target_h > h or target_w > w:
        raise ValueError("target dims must not exceed source dims")
    rb = [int(round(i * h / target_h)) for i in range(target_h + 1)]
    cb = [int(round(j * w / target_w)) for j in range(target_w + 1)]
    out = np.zeros((target_h, target_w), dtype=np.int32)
    for i in range(target_h):
        for j in range(target_w):
            block = mask.labels[rb[i]:max(rb[i + 1], rb[i] + 1),
                                cb[j]:max(cb[j + 1], cb[j] + 1)]
            vals, cnt = np.unique(block, return_counts=True)
            out[i, j] = vals[np.argmax(cnt)]  # unique is sorted: tie -> smallest
    uniq, inv = np.unique(out, return_inverse=True)
    return SuperpixelMask(labels=inv.reshape(out.shape).astype(np.int32),
                          n_clusters=len(uniq))

"""Image/label IO, the RGB-composite artery/vein label codec, dataset
layouts, preprocessing and a procedural synthetic vascular-tree generator
for desk-scale experiments.

Label composites map the red, green and blue channels to the artery, vein
and vessel masks, so arteries render magenta, veins cyan, crossings white
and uncertain vessels blue.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

BINARIZE_THRESHOLD = 128


class DatasetError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("dataset errors:\n" + "\n".join(self.problems))


@dataclass
class DatasetEntry:
    image_path: Path
    label_path: Path
    fov_path: Path | None = None
    mask_path: Path | None = None  # cached superpixel mask
    split: str = "train"


@dataclass(frozen=True)
class SyntheticTreeConfig:
    canvas_size: int = 128
    depth: int = 5
    angle_range: tuple = (0.25, 0.85)  # radians, per-branch spread
    width_decay: float = 0.78
    vessels_per_class: int = 3
    noise_level: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.canvas_size <= 0 or self.depth < 1 or self.vessels_per_class < 1:
            raise ValueError("invalid synthetic config")
        if not 0 < self.width_decay < 1:
            raise ValueError("width_decay must be in (0, 1)")


# ---------------------------------------------------------------------------
# label codec

def decode_av_label(img: np.ndarray, strict: bool = False):
    """RGB composite -> (l_a, l_v, l_bv) binary float maps.

    Channels binarize at 128.  Pixels violating the subset invariant
    (artery or vein set but vessel clear) are repaired by setting the
    vessel bit; the repair count is logged and returned.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] < 3:
        raise ValueError("expected an RGB label image")
    if strict:
        bad = ~np.isin(img[..., :3], (0, 255))
        if bad.any():
            raise ValueError(f"{int(bad.sum())} non-binary channel values in strict mode")
    else:
        off = (img[..., :3] != 0) & (img[..., :3] != 255)
        if off.any():
            log.warning("label has %d antialiased channel values (binarizing at %d)",
                        int(off.sum()), BINARIZE_THRESHOLD)
    l_a = (img[..., 0] >= BINARIZE_THRESHOLD).astype(np.float64)
    l_v = (img[..., 1] >= BINARIZE_THRESHOLD).astype(np.float64)
    l_bv = (img[..., 2] >= BINARIZE_THRESHOLD).astype(np.float64)
    violations = ((l_a > l_bv) | (l_v > l_bv))
    repaired = int(violations.sum())
    if repaired:
        log.warning("repaired %d label pixels violating the vessel-subset invariant",
                    repaired)
        l_bv = np.maximum(l_bv, np.maximum(l_a, l_v))
    return l_a, l_v, l_bv, repaired


def encode_av_label(l_a, l_v, l_bv) -> np.ndarray:
    """Inverse of decode: channelwise x255 RGB composite."""
    out = np.stack([np.asarray(l_a), np.asarray(l_v), np.asarray(l_bv)], axis=-1)
    return (out > 0.5).astype(np.uint8) * 255


# ---------------------------------------------------------------------------
# PNG helpers

def load_rgb(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def save_rgb(path, arr: np.ndarray) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)


def save_mask_png(path, labels: np.ndarray, n_clusters: int) -> None:
    """Superpixel mask as 16-bit grayscale PNG plus a 'C=<count>' sidecar."""
    if n_clusters > 65536:
        raise ValueError("cluster count exceeds 16-bit PNG range")
    img = Image.fromarray(labels.astype(np.uint16))
    img.save(path)
    Path(str(path) + ".meta").write_text(f"C={n_clusters}\n")


def load_mask_png(path):
    labels = np.asarray(Image.open(path), dtype=np.int32)
    meta = Path(str(path) + ".meta")
    if meta.exists():
        n = int(meta.read_text().strip().split("=")[1])
    else:
        n = int(labels.max()) + 1
    return labels, n


# ---------------------------------------------------------------------------
# preprocessing

def preprocess(img: np.ndarray, local_contrast: bool = True) -> np.ndarray:
    """Decoded RGB -> standardized float tensor [3, H, W].

    Optional local contrast enhancement divides each channel by the
    Gaussian-blurred luminance (sigma = W/30) before per-channel
    standardization.
    """
    x = np.asarray(img, dtype=np.float64) / 255.0
    if x.ndim == 2:
        x = np.stack([x] * 3, axis=-1)
    if local_contrast:
        lum = x @ np.array([0.299, 0.587, 0.114])
        sigma = max(1.0, x.shape[1] / 30.0)
        smooth = ndimage.gaussian_filter(lum, sigma) + 1e-3
        x = x / smooth[..., None]
    out = np.empty((3, x.shape[0], x.shape[1]), dtype=np.float64)
    for c in range(3):
        ch = x[..., c]
        out[c] = (ch - ch.mean()) / (ch.std() + 1e-8)
    return out


# ---------------------------------------------------------------------------
# synthetic vascular trees

def _draw_segment(canvas: np.ndarray, p0, p1, width: float) -> None:
    """Stamp a thick line segment into a boolean canvas."""
    h, w = canvas.shape
    r = max(width / 2.0, 0.5)
    x0 = max(0, int(math.floor(min(p0[1], p1[1]) - r - 1)))
    x1 = min(w, int(math.ceil(max(p0[1], p1[1]) + r + 2)))
    y0 = max(0, int(math.floor(min(p0[0], p1[0]) - r - 1)))
    y1 = min(h, int(math.ceil(max(p0[0], p1[0]) + r + 2)))
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    d = np.array([p1[0] - p0[0], p1[1] - p0[1]])
    len2 = d @ d
    vy, vx = ys - p0[0], xs - p0[1]
    if len2 < 1e-12:
        dist2 = vy ** 2 + vx ** 2
    else:
        t = np.clip((vy * d[0] + vx * d[1]) / len2, 0.0, 1.0)
        dist2 = (vy - t * d[0]) ** 2 + (vx - t * d[1]) ** 2
    canvas[y0:y1, x0:x1] |= dist2 <= r * r


def _grow_tree(rng, canvas, start, heading, length, width, depth, cfg):
    end = (start[0] + length * math.sin(heading),
           start[1] + length * math.cos(heading))
    _draw_segment(canvas, start, end, width)
    if depth <= 1 or width < 0.6:
        return
    lo, hi = cfg.angle_range
    for sign in (-1.0, 1.0):
        ang = heading + sign * rng.uniform(lo, hi)
        _grow_tree(rng, canvas, end, ang,
                   length * rng.uniform(0.7, 0.9),
                   width * cfg.width_decay, depth - 1, cfg)


def generate_synthetic(cfg: SyntheticTreeConfig):
    """Render one (image, label) pair of two branching trees.

    One tree is artery-toned reddish, the other a darker red-purple vein
    tone; labels come exactly from the rasterized strokes, so overlaps
    yield crossing pixels.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.canvas_size
    artery = np.zeros((n, n), dtype=bool)
    vein = np.zeros((n, n), dtype=bool)
    disc = (n * rng.uniform(0.35, 0.65), n * rng.uniform(0.35, 0.65))
    for canvas in (artery, vein):
        for _ in range(cfg.vessels_per_class):
            heading = rng.uniform(0, 2 * math.pi)
            start = (disc[0] + 3.0 * math.sin(heading),
                     disc[1] + 3.0 * math.cos(heading))
            _grow_tree(rng, canvas, start, heading,
                       length=n * rng.uniform(0.15, 0.22),
                       width=n / 56.0, depth=cfg.depth, cfg=cfg)
    l_a = artery.astype(np.float64)
    l_v = vein.astype(np.float64)
    l_bv = (artery | vein).astype(np.float64)

    # fundus-like background: warm base + smooth texture + noise
    base = np.array([168.0, 108.0, 62.0])
    img = np.tile(base, (n, n, 1))
    texture = ndimage.gaussian_filter(rng.normal(0, 1, (n, n)), n / 16.0)
    texture = texture / (np.abs(texture).max() + 1e-9)
    img += texture[..., None] * 18.0
    yy, xx = np.mgrid[0:n, 0:n]
    disc_glow = np.exp(-(((yy - disc[0]) ** 2 + (xx - disc[1]) ** 2) / (2 * (n / 10) ** 2)))
    img += disc_glow[..., None] * np.array([60.0, 55.0, 40.0])
    img[artery] = np.array([196.0, 84.0, 70.0])
    img[vein] = np.array([132.0, 52.0, 84.0])
    img[artery & vein] = np.array([164.0, 68.0, 77.0])
    img += rng.normal(0, cfg.noise_level, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8), (l_a, l_v, l_bv)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_synthetic_dataset(out_dir, n_images: int, cfg: SyntheticTreeConfig,
                            n_test: int | None = None) -> list[DatasetEntry]:
    """Emit a flat-layout dataset (images/, labels/, manifest.json).

    The last ``n_test`` images (default: 20% rounded down, at least 1)
    are tagged test.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    if n_test is None:
        n_test = max(1, n_images // 5)
    entries = []
    manifest = {"layout": "flat", "entries": []}
    for i in range(n_images):
        icfg = SyntheticTreeConfig(**{**cfg.__dict__, "seed": cfg.seed + i})
        img, (l_a, l_v, l_bv) = generate_synthetic(icfg)
        stem = f"synth_{i:03d}"
        ip = out_dir / "images" / f"{stem}.png"
        lp = out_dir / "labels" / f"{stem}.png"
        save_rgb(ip, img)
        save_rgb(lp, encode_av_label(l_a, l_v, l_bv))
        split = "test" if i >= n_images - n_test else "train"
        entries.append(DatasetEntry(ip, lp, split=split))
        manifest["entries"].append({
            "image": str(ip.relative_to(out_dir)),
            "label": str(lp.relative_to(out_dir)),
            "split": split,
            "sha256_image": _sha256(ip),
            "sha256_label": _sha256(lp),
        })
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return entries


# ---------------------------------------------------------------------------
# dataset layouts

def _pair_by_stem(img_dir: Path, lbl_dir: Path, fov_dir: Path | None = None):
    problems = []
    entries = []
    images = sorted(p for p in img_dir.iterdir() if p.is_file())
    labels = {p.stem: p for p in lbl_dir.iterdir() if p.is_file()} if lbl_dir.exists() else {}
    used = set()
    for ip in images:
        lp = labels.get(ip.stem)
        if lp is None:
            problems.append(f"image without label: {ip}")
            continue
        used.add(ip.stem)
        fov = None
        if fov_dir is not None and fov_dir.exists():
            cand = fov_dir / ip.name
            fov = cand if cand.exists() else None
        entries.append(DatasetEntry(ip, lp, fov_path=fov))
    for stem, lp in labels.items():
        if stem not in used:
            problems.append(f"label without image: {lp}")
    return entries, problems


def load_dataset(root, layout: str = "flat") -> list[DatasetEntry]:
    """Enumerate (image, label) entries with per-layout split conventions.

    rite: training/ and test/ subtrees (20/20).  lesav: 22 images, first 11
    stems train.  hrf: 45 images named <idx>_<category>, first five of each
    category test.  flat: images/ + labels/ paired by stem; a manifest.json,
    when present, supplies the split tags.
    """
    root = Path(root)
    if not root.exists():
        raise DatasetError([f"dataset root does not exist: {root}"])
    problems: list[str] = []
    entries: list[DatasetEntry] = []
    if layout == "rite":
        for split, sub in (("train", "training"), ("test", "test")):
            es, ps = _pair_by_stem(root / sub / "images", root / sub / "av",
                                   root / sub / "mask")
            for e in es:
                e.split = split
            entries += es
            problems += ps
    elif layout == "lesav":
        es, ps = _pair_by_stem(root / "images", root / "labels", root / "fov")
        problems += ps
        for i, e in enumerate(es):
            e.split = "train" if i < 11 else "test"
        entries = es
    elif layout == "hrf":
        es, ps = _pair_by_stem(root / "images", root / "labels", root / "fov")
        problems += ps
        by_cat: dict[str, list[DatasetEntry]] = {}
        for e in es:
            cat = e.image_path.stem.split("_")[-1]
            by_cat.setdefault(cat, []).append(e)
        for cat, group in by_cat.items():
            group.sort(key=lambda e: e.image_path.stem)
            for i, e in enumerate(group):
                e.split = "test" if i < 5 else "train"
        entries = es
    elif layout == "flat":
        manifest = root / "manifest.json"
        if manifest.exists():
            data = json.loads(manifest.read_text())
            for item in data["entries"]:
                ip, lp = root / item["image"], root / item["label"]
                for p in (ip, lp):
                    if not p.exists():
                        problems.append(f"missing file from manifest: {p}")
                entries.append(DatasetEntry(ip, lp, split=item.get("split", "train")))
        else:
            es, ps = _pair_by_stem(root / "images", root / "labels", root / "fov")
            entries, problems = es, problems + ps
    else:
        raise DatasetError([f"unknown layout: {layout}"])
    if problems:
        raise DatasetError(problems)
    return entries


def load_entry(entry: DatasetEntry):
    """Load and decode one entry: (image rgb, (l_a, l_v, l_bv), fov or None)."""
    img = load_rgb(entry.image_path)
    l_a, l_v, l_bv, _ = decode_av_label(load_rgb(entry.label_path))
    if img.shape[:2] != l_a.shape:
        raise DatasetError([f"image/label dims differ for {entry.image_path}"])
    fov = None
    if entry.fov_path is not None:
        fov = np.asarray(Image.open(entry.fov_path).convert("L")) >= BINARIZE_THRESHOLD
    return img, (l_a, l_v, l_bv), fov

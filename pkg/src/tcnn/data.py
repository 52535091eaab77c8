"""Image ingestion, preprocessing, splitting, augmentation, and a synthetic
defect-image generator.

The generator renders a bright disc with two attached wires on a noisy,
line-dependent illumination background: three simulated production lines with
distinct brightness, gradient direction, and color tint. Defective samples
get one of three visually distinct faults: a dark blob on the disc (debris),
a gap in one wire (broken wire), or a wire attached at the wrong spot on the
disc (misplaced weld). Labels are exact by construction.

Preprocessing mirrors the inspection pipeline: per-channel contrast stretch
(2nd/98th percentile mapped to 0/1), bilinear resize, pixel range [0, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import rng as tcnn_rng

# defect_kind ids follow the plant taxonomy subset the generator can render
KIND_MISPLACED_WELD = 4
KIND_DEBRIS = 6
KIND_BROKEN_WIRE = 7

LINE_BASE_BRIGHTNESS = (0.32, 0.42, 0.52)
LINE_TINTS = ((1.00, 0.95, 0.90), (0.94, 1.00, 0.94), (0.90, 0.95, 1.00))
LINE_GRADIENT_ANGLES = (0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0)


@dataclass
class Sample:
    """One preprocessed image with its label and provenance."""

    image: np.ndarray  # (3, S, S) float32 in [0, 1]
    label: int  # 0 = non-defective, 1 = defective
    line_id: int
    defect_kind: int | None = None


@dataclass
class RawRecord:
    """One rendered (or loaded) image before preprocessing."""

    image: np.ndarray  # (S, S, 3) uint8
    label: int
    line_id: int
    defect_kind: int | None = None


@dataclass
class AugmentConfig:
    """Probabilities and magnitude ranges for training-time augmentation."""

    color_p: float = 0.5
    brightness_range: tuple[float, float] = (0.8, 1.2)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    crop_p: float = 0.5
    crop_area_range: tuple[float, float] = (0.7, 1.0)
    cutout_p: float = 0.3
    cutout_fraction: float = 1.0 / 8.0  # patch side as a fraction of S

    def __post_init__(self):
        for name in ("color_p", "crop_p", "cutout_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")


@dataclass
class SplitDataset:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    fractions: tuple[float, float, float]
    train_weights: np.ndarray = field(default=None)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of an (H, W, C) image with center-aligned pixels.

    When the size is unchanged this is an exact copy.
    """
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    img = img.reshape(h, w, -1)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def preprocess(raw_image: np.ndarray, size: int = 64) -> np.ndarray:
    """Contrast-stretch, resize, and normalize one RGB image to (3, S, S).

    The stretch maps each channel's 2nd/98th intensity percentiles to 0/1
    (clamped); constant channels pass through unchanged rather than dividing
    by zero.
    """
    if raw_image.ndim != 3 or raw_image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {raw_image.shape}")
    if min(raw_image.shape[:2]) < 8:
        raise ValueError(f"image too small to preprocess: {raw_image.shape}")
    img = raw_image.astype(np.float64)
    if np.issubdtype(raw_image.dtype, np.integer):
        img /= 255.0
    for c in range(3):
        lo, hi = np.percentile(img[:, :, c], (2.0, 98.0))
        if hi - lo > 1e-12:
            img[:, :, c] = (img[:, :, c] - lo) / (hi - lo)
    img = np.clip(img, 0.0, 1.0)
    img = bilinear_resize(img, size, size)
    return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float32)


# --- synthetic generator ----------------------------------------------------

def _disc_mask(yy, xx, cy, cx, radius, softness=1.0):
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.clip((radius - r) / softness, 0.0, 1.0), r


def _capsule_mask(yy, xx, p0, p1, width, t_lo=0.0, t_hi=1.0, softness=1.0):
    """Soft mask of a thick line segment; only the parameter range
    [t_lo, t_hi] of the segment is drawn (used for broken wires)."""
    d = p1 - p0
    len2 = float(d @ d)
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / len2
    t = np.clip(t, t_lo, t_hi)
    dist = np.sqrt((yy - (p0[0] + t * d[0])) ** 2 + (xx - (p0[1] + t * d[1])) ** 2)
    return np.clip((width - dist) / softness, 0.0, 1.0)


def _render_sample(gen: np.random.Generator, size: int, line_id: int,
                   defect_kind: int | None) -> np.ndarray:
    s = float(size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    base = LINE_BASE_BRIGHTNESS[line_id] + gen.uniform(-0.02, 0.02)
    angle = LINE_GRADIENT_ANGLES[line_id] + gen.uniform(-0.3, 0.3)
    grad_strength = 0.12 + gen.uniform(-0.03, 0.03)
    proj = (np.cos(angle) * xx + np.sin(angle) * yy) / s
    lum = base + grad_strength * (proj - proj.mean())

    cy = s * 0.5 + gen.uniform(-0.04, 0.04) * s
    cx = s * 0.5 + gen.uniform(-0.04, 0.04) * s
    r0 = s * (0.28 + gen.uniform(0.0, 0.04))
    disc_alpha, rdist = _disc_mask(yy, xx, cy, cx, r0)
    disc_val = 0.85 * (1.0 - 0.15 * np.clip(rdist / r0, 0.0, 1.0) ** 2)
    disc_val *= 1.0 + 0.3 * (lum - base)

    img = lum.copy()
    img = img * (1 - disc_alpha) + disc_val * disc_alpha

    # two wires leaving the disc toward the lower image corners
    wire_angles = [
        np.deg2rad(215.0) + gen.uniform(-0.15, 0.15),
        np.deg2rad(325.0) + gen.uniform(-0.15, 0.15),
    ]
    broken_wire = gen.integers(0, 2) if defect_kind == KIND_BROKEN_WIRE else -1
    if defect_kind == KIND_MISPLACED_WELD:
        which = gen.integers(0, 2)
        shift = np.deg2rad(gen.uniform(35.0, 60.0)) * (1 if gen.random() < 0.5 else -1)
        wire_angles[which] += shift
    width = s / 32.0
    for w_idx, ang in enumerate(wire_angles):
        anchor = np.array([cy + np.sin(ang) * r0 * 0.95, cx + np.cos(ang) * r0 * 0.95])
        end = anchor + np.array([np.sin(ang), np.cos(ang)]) * s
        end = np.clip(end, -0.2 * s, 1.2 * s)
        if w_idx == broken_wire:
            gap_center = gen.uniform(0.25, 0.5)
            gap_half = gen.uniform(0.1, 0.16)
            m1 = _capsule_mask(yy, xx, anchor, end, width, 0.0, gap_center - gap_half)
            m2 = _capsule_mask(yy, xx, anchor, end, width, gap_center + gap_half, 1.0)
            wire_alpha = np.maximum(m1, m2)
        else:
            wire_alpha = _capsule_mask(yy, xx, anchor, end, width)
        img = img * (1 - wire_alpha) + 0.70 * wire_alpha

    if defect_kind == KIND_DEBRIS:
        br = s * (0.08 + gen.uniform(0.0, 0.04))
        ang = gen.uniform(0.0, 2 * np.pi)
        rad = gen.uniform(0.0, 0.55) * r0
        by, bx = cy + np.sin(ang) * rad, cx + np.cos(ang) * rad
        blob_alpha, _ = _disc_mask(yy, xx, by, bx, br)
        img = img * (1 - blob_alpha) + (img * 0.25) * blob_alpha

    img = img + gen.normal(0.0, 0.015, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    tint = np.asarray(LINE_TINTS[line_id])
    rgb = np.clip(img[:, :, None] * tint[None, None, :], 0.0, 1.0)
    return np.round(rgb * 255.0).astype(np.uint8)


def generate_synthetic(n: int, defect_fraction: float, seed: int,
                       size: int = 64) -> list[RawRecord]:
    """Render ``n`` labeled images; exactly ``round(n * defect_fraction)`` are
    defective (kinds cycle through debris, broken wire, misplaced weld).
    Deterministic by seed: each sample draws from substream (seed, index)."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0.0 < defect_fraction < 1.0:
        raise ValueError("defect_fraction must be in (0, 1)")
    n_defective = int(round(n * defect_fraction))
    kinds = (KIND_DEBRIS, KIND_BROKEN_WIRE, KIND_MISPLACED_WELD)
    records = []
    for i in range(n):
        gen = tcnn_rng.stream(seed, i)
        defective = i < n_defective
        kind = kinds[i % 3] if defective else None
        line_id = i % 3
        img = _render_sample(gen, size, line_id, kind)
        records.append(RawRecord(image=img, label=int(defective),
                                 line_id=line_id, defect_kind=kind))
    return records


def samples_from_records(records: list[RawRecord], size: int = 64) -> list[Sample]:
    return [
        Sample(image=preprocess(r.image, size), label=r.label,
               line_id=r.line_id, defect_kind=r.defect_kind)
        for r in records
    ]


# --- splitting and sampling -------------------------------------------------

def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation summing to ``total`` that best matches ``quotas``."""
    base = np.floor(quotas).astype(int)
    remainder = total - int(base.sum())
    if remainder > 0:
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:remainder]] += 1
    return base


def stratified_split_indices(
    labels: np.ndarray, fractions: tuple[float, float, float], seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic class-stratified index split.

    Validation and test sizes are ``round(fraction * n)``, allocated across
    classes by largest remainder; train takes whatever is left.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("dataset must contain both classes")
    n = len(labels)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    class_sizes = np.array([(labels == c).sum() for c in classes], dtype=float)
    val_alloc = _largest_remainder(class_sizes * n_val / n, n_val)
    test_alloc = _largest_remainder(class_sizes * n_test / n, n_test)

    gen = tcnn_rng.stream(seed, 0)
    train, val, test = [], [], []
    for ci, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[gen.permutation(len(idx))]
        nv, nt = int(val_alloc[ci]), int(test_alloc[ci])
        val.append(idx[:nv])
        test.append(idx[nv : nv + nt])
        train.append(idx[nv + nt :])
    return (np.concatenate(train), np.concatenate(val), np.concatenate(test))


def split(samples: list[Sample], fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
          seed: int = 0) -> SplitDataset:
    """Split samples into deterministic, class-stratified train/val/test."""
    labels = np.array([s.label for s in samples])
    tr, va, te = stratified_split_indices(labels, fractions, seed)
    ds = SplitDataset(
        train=[samples[i] for i in tr],
        val=[samples[i] for i in va],
        test=[samples[i] for i in te],
        fractions=tuple(fractions),
    )
    ds.train_weights = sampler_weights(ds.train)
    return ds


def sampler_weights(samples: list[Sample]) -> np.ndarray:
    """Per-sample weight 1 / (size of its class): weighted sampling with
    replacement then draws each class equally often in expectation."""
    labels = np.array([s.label for s in samples])
    counts = {c: int((labels == c).sum()) for c in np.unique(labels)}
    if len(counts) < 2:
        raise ValueError("sampler weights need both classes present")
    return np.array([1.0 / counts[l] for l in labels])


# --- augmentation -----------------------------------------------------------

def augment(sample: Sample, cfg: AugmentConfig,
            gen: np.random.Generator) -> Sample:
    """Apply color jitter, random resized crop, and cutout, each gated by its
    probability. Shape and label are preserved; pixels stay in [0, 1]. The
    output is a new Sample; determinism follows from the generator state."""
    img = sample.image.copy()
    s = img.shape[1]

    if gen.random() < cfg.color_p:
        fb = gen.uniform(*cfg.brightness_range)
        fc = gen.uniform(*cfg.contrast_range)
        img *= fb
        mean = img.mean(axis=(1, 2), keepdims=True)
        img = (img - mean) * fc + mean
        img = np.clip(img, 0.0, 1.0)

    if gen.random() < cfg.crop_p:
        area = gen.uniform(*cfg.crop_area_range)
        side = int(np.clip(round(s * np.sqrt(area)), 1, s))
        top = int(gen.integers(0, s - side + 1))
        left = int(gen.integers(0, s - side + 1))
        crop = img[:, top : top + side, left : left + side]
        img = bilinear_resize(crop.transpose(1, 2, 0), s, s).transpose(2, 0, 1)
        img = np.clip(img, 0.0, 1.0)

    if gen.random() < cfg.cutout_p:
        patch = max(1, int(round(s * cfg.cutout_fraction)))
        top = int(gen.integers(0, s - patch + 1))
        left = int(gen.integers(0, s - patch + 1))
        fill = img.mean(axis=(1, 2))
        img[:, top : top + patch, left : left + patch] = fill[:, None, None]

    return Sample(image=img.astype(np.float32), label=sample.label,
                  line_id=sample.line_id, defect_kind=sample.defect_kind)


# --- disk layout -------------------------------------------------------------

INDEX_COLUMNS = ["relative_path", "label", "line_id", "defect_kind", "split"]


def write_dataset(records: list[RawRecord], splits: list[str],
                  root: str | Path) -> Path:
    """Write images plus index.csv (relative_path, label, line_id,
    defect_kind, split) under ``root``."""
    if len(records) != len(splits):
        raise ValueError("records and split assignments differ in length")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (rec, sp) in enumerate(zip(records, splits)):
        rel = f"images/{i:06d}.png"
        Image.fromarray(rec.image).save(root / rel)
        rows.append([rel, rec.label, rec.line_id,
                     "" if rec.defect_kind is None else rec.defect_kind, sp])
    with open(root / "index.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(INDEX_COLUMNS)
        writer.writerows(rows)
    return root


def load_dataset(root: str | Path, size: int = 64) -> SplitDataset:
    """Read index.csv plus images and return preprocessed, pre-split samples."""
    root = Path(root)
    buckets: dict[str, list[Sample]] = {"train": [], "val": [], "test": []}
    with open(root / "index.csv", newline="") as f:
        for row in csv.DictReader(f):
            img = np.asarray(Image.open(root / row["relative_path"]).convert("RGB"))
            kind = int(row["defect_kind"]) if row["defect_kind"] else None
            sample = Sample(image=preprocess(img, size), label=int(row["label"]),
                            line_id=int(row["line_id"]), defect_kind=kind)
            if row["split"] not in buckets:
                raise ValueError(f"unknown split {row['split']!r} in index.csv")
            buckets[row["split"]].append(sample)
    n = sum(len(v) for v in buckets.values())
    ds = SplitDataset(train=buckets["train"], val=buckets["val"],
                      test=buckets["test"],
                      fractions=tuple(len(buckets[k]) / n for k in ("train", "val", "test")))
    ds.train_weights = sampler_weights(ds.train)
    return ds


def stack_images(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into an (N, 3, S, S) float32 batch plus a label vector."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels

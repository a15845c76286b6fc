"""Dataset loading, deterministic splits, augmentation, synthetic benchmark.

Images are float32 (C,H,W) in [0,1] everywhere. The synthetic generator
builds a fine-grained task at desk scale: classes share identically
distributed cluttered backgrounds and differ only in a small glyph
stamped at one or more locations, so class evidence is localized and
exactly maskable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractError, DataError
from .pnm import read_pnm
from .rng import derive_rng


@dataclass
class Dataset:
    images: np.ndarray  # (M, C, H, W) float32 in [0,1]
    labels: np.ndarray  # (M,) int64
    class_names: list
    image_size: int
    sample_ids: Optional[np.ndarray] = None  # original indices after a split
    groups: Optional[np.ndarray] = None  # optional group id per sample

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update("|".join(self.class_names).encode("utf-8"))
        h.update(np.ascontiguousarray(self.images, dtype=np.float32).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        return h.hexdigest()


def _bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Sample (C,H,W) at fractional coords; out-of-bounds reads give 0."""
    c, h, w = img.shape
    inside = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
    ys = np.clip(sy, 0, h - 1)
    xs = np.clip(sx, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)
    wx = (xs - x0).astype(np.float32)
    top = img[:, y0, x0] * (1 - wx) + img[:, y0, x1] * wx
    bot = img[:, y1, x0] * (1 - wx) + img[:, y1, x1] * wx
    out = top * (1 - wy) + bot * wy
    return (out * inside).astype(np.float32)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C,H,W) with corner-aligned bilinear interpolation."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32).copy()
    sy = np.linspace(0, h - 1, out_h, dtype=np.float64)[:, None]
    sx = np.linspace(0, w - 1, out_w, dtype=np.float64)[None, :]
    sy = np.broadcast_to(sy, (out_h, out_w))
    sx = np.broadcast_to(sx, (out_h, out_w))
    return _bilinear_sample(img.astype(np.float32), sy, sx)


def load_dir(root, image_size: int) -> Dataset:
    """Load root/<class_name>/<file>.ppm trees, lexicographic order.

    Images are decoded (binary P6), resized to image_size and scaled to
    [0,1]. An optional root/groups.tsv (relative path TAB group id) tags
    samples so splits can keep a group inside one partition.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root is not a directory: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"no class subdirectories under {root}")

    group_of: dict[str, str] = {}
    groups_file = root / "groups.tsv"
    if groups_file.exists():
        for line in groups_file.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rel, gid = line.split("\t")
            except ValueError:
                raise DataError(f"malformed line in {groups_file}: {line!r}")
            group_of[rel] = gid

    images, labels, groups = [], [], []
    class_names = [d.name for d in class_dirs]
    for label, cdir in enumerate(class_dirs):
        files = sorted(cdir.glob("*.ppm"))
        if not files:
            raise DataError(f"class directory has no .ppm images: {cdir}")
        for f in files:
            arr = read_pnm(f)
            if arr.ndim != 3:
                raise DataError(f"expected a color P6 image: {f}")
            chw = arr.transpose(2, 0, 1).astype(np.float32) / 255.0
            images.append(resize_bilinear(chw, image_size, image_size))
            labels.append(label)
            groups.append(group_of.get(str(f.relative_to(root)), ""))
    has_groups = any(g for g in groups)
    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=class_names,
        image_size=image_size,
        groups=np.asarray(groups) if has_groups else None,
    )


def _allocate_counts(n: int, fractions) -> list[int]:
    """Largest-remainder allocation of n items to the given fractions."""
    raw = [f * n for f in fractions]
    base = [int(np.floor(r)) for r in raw]
    short = n - sum(base)
    order = sorted(range(len(raw)), key=lambda i: (base[i] - raw[i], i))
    for i in order[:short]:
        base[i] += 1
    return base


def split(dataset: Dataset, fractions, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified per-class split into (train, val, test).

    Deterministic in seed; the three parts partition the dataset. When
    the dataset carries group ids, all samples of a group land in the
    same part (best effort against the per-class quotas).
    """
    if len(fractions) != 3:
        raise ContractError(f"expected 3 fractions, got {len(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ContractError(f"fractions must be non-negative and sum to 1: {fractions}")
    parts = sum(1 for f in fractions if f > 0)
    part_indices: list[list[int]] = [[], [], []]
    for label in range(dataset.num_classes):
        cls_idx = np.nonzero(dataset.labels == label)[0]
        if len(cls_idx) < parts:
            raise DataError(
                f"class {dataset.class_names[label]!r} has {len(cls_idx)} samples, "
                f"fewer than the {parts} split parts"
            )
        rng = derive_rng(seed, "split", label)
        if dataset.groups is not None:
            units = {}
            for i in cls_idx:
                units.setdefault(dataset.groups[i], []).append(int(i))
            unit_list = [units[k] for k in sorted(units)]
            rng.shuffle(unit_list)
            counts = _allocate_counts(len(cls_idx), fractions)
            filled = [0, 0, 0]
            for unit in unit_list:
                # place into the part with the most remaining quota
                gaps = [counts[j] - filled[j] for j in range(3)]
                j = int(np.argmax(gaps))
                part_indices[j].extend(unit)
                filled[j] += len(unit)
        else:
            perm = cls_idx[rng.permutation(len(cls_idx))]
            counts = _allocate_counts(len(cls_idx), fractions)
            pos = 0
            for j in range(3):
                part_indices[j].extend(int(i) for i in perm[pos : pos + counts[j]])
                pos += counts[j]

    out = []
    for idx in part_indices:
        idx_arr = np.asarray(sorted(idx), dtype=np.int64)
        out.append(
            Dataset(
                images=dataset.images[idx_arr].copy(),
                labels=dataset.labels[idx_arr].copy(),
                class_names=list(dataset.class_names),
                image_size=dataset.image_size,
                sample_ids=idx_arr,
                groups=None if dataset.groups is None else dataset.groups[idx_arr],
            )
        )
    return out[0], out[1], out[2]


def _rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center, bilinear, zero fill outside."""
    c, h, w = img.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    sy = cy + dy * cos_t + dx * sin_t
    sx = cx - dy * sin_t + dx * cos_t
    return _bilinear_sample(img, sy, sx)


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    flip: bool = True,
    rotation: float = 40.0,
    channel_shift: float = 30.0,
    brightness: tuple = (0.5, 1.5),
) -> np.ndarray:
    """Stochastic augmentation: flip, rotate, channel shift, brightness.

    Each transform applies independently; channel shift range is in 8-bit
    units. Output is clamped back into [0,1].
    """
    out = np.ascontiguousarray(image, dtype=np.float32)
    if flip and rng.random() < 0.5:
        out = out[:, :, ::-1].copy()
    if rotation > 0:
        out = _rotate(out, float(rng.uniform(-rotation, rotation)))
    if channel_shift > 0:
        shifts = rng.uniform(-channel_shift, channel_shift, size=out.shape[0]) / 255.0
        out = out + shifts.astype(np.float32)[:, None, None]
    lo, hi = brightness
    if (lo, hi) != (1.0, 1.0):
        out = out * np.float32(rng.uniform(lo, hi))
    return np.clip(out, 0.0, 1.0)


@dataclass
class SynthSpec:
    """Parameters of the synthetic fine-grained benchmark."""

    num_classes: int = 4
    per_class: int = 200
    canvas: int = 64
    cue_size: int = 5
    redundancy: int = 1
    clutter: float = 0.5
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.per_class < 1:
            raise ContractError(f"per_class must be >= 1, got {self.per_class}")
        if self.redundancy < 1:
            raise ContractError(f"redundancy must be >= 1, got {self.redundancy}")
        if self.cue_size * 4 > self.canvas:
            raise ContractError(
                f"cue size {self.cue_size} too large for canvas {self.canvas}"
            )
        if not (0.0 <= self.clutter <= 1.0):
            raise ContractError(f"clutter must lie in [0,1], got {self.clutter}")
        return self


def _make_glyphs(spec: SynthSpec) -> np.ndarray:
    """Per-class binary cue patterns, pairwise Hamming distance >= 4."""
    rng = derive_rng(spec.seed, "synth_glyph")
    bits = spec.cue_size * spec.cue_size
    min_on = max(2, bits // 4)
    glyphs: list[np.ndarray] = []
    for _ in range(spec.num_classes):
        for _attempt in range(1000):
            cand = (rng.random(bits) < 0.5).astype(np.uint8)
            if cand.sum() < min_on or (bits - cand.sum()) < min_on:
                continue
            if all(int(np.sum(cand != g)) >= 4 for g in glyphs):
                glyphs.append(cand)
                break
        else:
            raise DataError("could not sample distinct cue glyphs")
    out = np.stack(glyphs).reshape(spec.num_classes, spec.cue_size, spec.cue_size)
    return out


def _background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Cluttered background, identical in distribution for every class."""
    c = spec.canvas
    img = np.full((3, c, c), 0.12, dtype=np.float32)
    n_blobs = int(6 + spec.clutter * 34)
    for _ in range(n_blobs):
        bh = int(rng.integers(2, 9))
        bw = int(rng.integers(2, 9))
        top = int(rng.integers(0, c - bh + 1))
        left = int(rng.integers(0, c - bw + 1))
        val = rng.uniform(0.0, 0.65, size=3).astype(np.float32)
        img[:, top : top + bh, left : left + bw] = val[:, None, None]
    img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _cue_positions(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Non-overlapping top-left corners for the cue copies."""
    k = spec.cue_size
    limit = spec.canvas - k
    placed: list[tuple[int, int]] = []
    for _ in range(spec.redundancy):
        for _attempt in range(100):
            top = int(rng.integers(0, limit + 1))
            left = int(rng.integers(0, limit + 1))
            if all(abs(top - t) >= k or abs(left - l) >= k for t, l in placed):
                placed.append((top, left))
                break
        else:
            raise DataError(
                f"could not place {spec.redundancy} non-overlapping cues; "
                "reduce redundancy or enlarge the canvas"
            )
    return placed


def synth_generate(spec: SynthSpec) -> Dataset:
    """Generate the synthetic benchmark dataset.

    Backgrounds and cue positions are drawn from per-image streams shared
    across classes, so two images with the same index differ only inside
    the stamped cue rectangles.
    """
    spec.validate()
    glyphs = _make_glyphs(spec)
    images = np.empty(
        (spec.num_classes * spec.per_class, 3, spec.canvas, spec.canvas),
        dtype=np.float32,
    )
    labels = np.empty(spec.num_classes * spec.per_class, dtype=np.int64)
    row = 0
    for cls in range(spec.num_classes):
        for j in range(spec.per_class):
            bg = _background(spec, derive_rng(spec.seed, "synth_bg", j))
            positions = _cue_positions(spec, derive_rng(spec.seed, "synth_pos", j))
            img = bg
            for top, left in positions:
                patch = glyphs[cls].astype(np.float32)
                img[:, top : top + spec.cue_size, left : left + spec.cue_size] = patch
            images[row] = img
            labels[row] = cls
            row += 1
    class_names = [f"class_{i}" for i in range(spec.num_classes)]
    return Dataset(
        images=images,
        labels=labels,
        class_names=class_names,
        image_size=spec.canvas,
    )


def cue_positions_for_index(spec: SynthSpec, index: int) -> list[tuple[int, int]]:
    """Reproduce the cue placements used for image `index` of any class."""
    return _cue_positions(spec, derive_rng(spec.seed, "synth_pos", index))

"""Heat-map computation, thresholding, and the occlusion modes.

The heat map for one image is the rectified, channel-weighted sum of the
final conv layer's feature maps, where each channel weight is the spatial
mean of the target-class logit's gradient on that channel. The map is
upsampled (corner-aligned bilinear) to input resolution and min-max
normalized, giving a per-pixel weight in [0,1]. Pixels strictly above a
threshold are then occluded.

A brute-force patch-occlusion scorer lives here too; it is a validation
oracle only and is never called by training code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, StateError
from .layers import Model, forward_with_capture
from .tensor import Tape, Tensor, backward, mul, sum_all


@dataclass
class HeatMap:
    raw: np.ndarray  # (h, w) at feature-map resolution, non-negative
    normalized: np.ndarray  # (H, W) at input resolution, values in [0,1]
    source_class: int


@dataclass
class OcclusionMask:
    mask: np.ndarray  # (H, W) bool

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def min_max_norm(field: np.ndarray) -> np.ndarray:
    """Rescale to [0,1]; a constant field maps to all zeros.

    The constant case carries no localization signal, so nothing should
    be selected downstream (zeros never exceed a threshold in (0,1)).
    """
    field = np.asarray(field, dtype=np.float32)
    if not np.all(np.isfinite(field)):
        raise ContractError("min_max_norm requires finite values")
    lo = field.min()
    hi = field.max()
    if hi == lo:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


def upsample_bilinear(field: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D field.

    A 1x1 field broadcasts its single value; matching extents return the
    field unchanged.
    """
    field = np.asarray(field, dtype=np.float32)
    if field.ndim != 2:
        raise ContractError(f"expected a 2-D field, got shape {field.shape}")
    h, w = field.shape
    if h < 1 or w < 1 or out_h < 1 or out_w < 1:
        raise ContractError("extents must be positive")
    if (h, w) == (out_h, out_w):
        return field.copy()
    sy = np.linspace(0, h - 1, out_h) if h > 1 else np.zeros(out_h)
    sx = np.linspace(0, w - 1, out_w) if w > 1 else np.zeros(out_w)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0).astype(np.float32)[:, None]
    wx = (sx - x0).astype(np.float32)[None, :]
    top = field[np.ix_(y0, x0)] * (1 - wx) + field[np.ix_(y0, x1)] * wx
    bot = field[np.ix_(y1, x0)] * (1 - wx) + field[np.ix_(y1, x1)] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def grad_cam(model: Model, image: Tensor, target_class: int) -> HeatMap:
    """Heat map of the target class for one image under current weights.

    Backward runs from the pre-softmax logit of the target class (all
    other class gradients are zero by construction of the one-hot mask).
    Parameter gradient buffers are left exactly as found, so this is safe
    to call between a training forward and its optimizer step.
    """
    if image.data.ndim == 3:
        x = image.data[None, ...]
    elif image.data.ndim == 4 and image.data.shape[0] == 1:
        x = image.data
    else:
        raise ContractError(f"grad_cam takes one image, got shape {image.shape}")
    num_classes = model.num_classes
    if not (0 <= int(target_class) < num_classes):
        raise ContractError(
            f"target class {target_class} outside [0, {num_classes})"
        )
    in_h, in_w = x.shape[2], x.shape[3]

    params = model.named_parameters()
    stash = [(t, t.grad) for _, t in params]
    try:
        for _, t in params:
            t.grad = None
        with Tape():
            logits = forward_with_capture(model, Tensor._wrap(x, False), capture=True)
            onehot = np.zeros((1, num_classes), dtype=np.float32)
            onehot[0, int(target_class)] = 1.0
            score = sum_all(mul(logits, Tensor(onehot)))
        activation = model.captured_activation
        if activation is None:
            raise StateError("grad_cam requires an activation capture")
        backward(score)
        grads = activation.grad
        if grads is None:
            raise StateError("no gradient reached the captured activation")
    finally:
        for t, g in stash:
            t.grad = g
        model.captured_activation = None

    alpha = grads[0].mean(axis=(1, 2))  # per-channel weight
    raw = np.maximum(
        (alpha[:, None, None] * activation.data[0]).sum(axis=0), 0.0
    ).astype(np.float32)
    normalized = min_max_norm(upsample_bilinear(raw, in_h, in_w))
    return HeatMap(raw=raw, normalized=normalized, source_class=int(target_class))


def threshold_mask(heat: HeatMap | np.ndarray, th: float) -> OcclusionMask:
    """Select pixels with normalized weight strictly greater than th."""
    if not (0.0 < th < 1.0):
        raise ContractError(f"th must lie in (0, 1), got {th}")
    normalized = heat.normalized if isinstance(heat, HeatMap) else np.asarray(heat)
    return OcclusionMask(mask=normalized > np.float32(th))


def occlude(
    image: Tensor,
    mask: OcclusionMask,
    mode: str,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Replace masked pixels across all channels; the input is not mutated.

    Modes: "zero" and "one" write the constant; "random" draws an
    independent uniform [0,1] value per pixel per channel.
    """
    if image.data.ndim != 3:
        raise ContractError(f"occlude expects (C,H,W), got shape {image.shape}")
    c, h, w = image.shape
    if mask.mask.shape != (h, w):
        raise ContractError(
            f"mask extents {mask.mask.shape} mismatch image spatial extents {(h, w)}"
        )
    if image.data.min() < 0.0 or image.data.max() > 1.0:
        raise ContractError("occlude expects image values in [0,1]")
    out = image.data.copy()
    m = mask.mask
    if mode == "zero":
        out[:, m] = 0.0
    elif mode == "one":
        out[:, m] = 1.0
    elif mode == "random":
        if rng is None:
            raise ContractError("random occlusion requires an rng")
        out[:, m] = rng.random((c, int(m.sum())), dtype=np.float64).astype(np.float32)
    else:
        raise ContractError(f"unknown occlusion mode {mode!r}")
    return Tensor._wrap(out, False)


def colorize(normalized: np.ndarray) -> np.ndarray:
    """Map weights in [0,1] to an RGB ramp (blue -> green -> red), floats."""
    w = np.asarray(normalized, dtype=np.float32)
    r = np.clip(1.5 - np.abs(4.0 * w - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * w - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * w - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def overlay_rgb(image: np.ndarray, normalized: np.ndarray) -> np.ndarray:
    """Blend image 60% with the colorized map 40%; returns (H,W,3) uint8."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"overlay expects a (3,H,W) image, got {image.shape}")
    if image.shape[1:] != normalized.shape:
        raise ContractError(
            f"image extents {image.shape[1:]} mismatch map extents {normalized.shape}"
        )
    rgb = image.transpose(1, 2, 0)
    blended = 0.6 * rgb + 0.4 * colorize(normalized)
    return np.round(np.clip(blended, 0.0, 1.0) * 255).astype(np.uint8)


def export_heatmap(prefix: str, image: np.ndarray, heat: HeatMap) -> tuple[str, str]:
    """Write <prefix>_heat.pgm and <prefix>_overlay.ppm; returns the paths."""
    from .pnm import write_pgm, write_ppm

    gray = np.round(heat.normalized * 255).astype(np.uint8)
    heat_path = f"{prefix}_heat.pgm"
    overlay_path = f"{prefix}_overlay.ppm"
    write_pgm(heat_path, gray)
    write_ppm(overlay_path, overlay_rgb(image, heat.normalized))
    return heat_path, overlay_path


def _target_scores(model: Model, images: np.ndarray, target: int) -> np.ndarray:
    """Pre-softmax target logits for a stack of images, no recording."""
    scores = []
    for start in range(0, len(images), 64):
        chunk = np.ascontiguousarray(images[start : start + 64])
        logits = model.forward(Tensor._wrap(chunk, False))
        scores.append(logits.data[:, target])
    return np.concatenate(scores)


def occlusion_sensitivity(
    model: Model,
    image: Tensor,
    target_class: int,
    patch: int,
    stride: int,
) -> np.ndarray:
    """Brute-force score-drop field: clean score minus patched score.

    Slides a zeroed patch over the image; entry (i,j) covers the patch
    whose top-left corner is (i*stride, j*stride). Validation oracle
    only.
    """
    x = image.data if image.data.ndim == 3 else image.data[0]
    c, h, w = x.shape
    if patch > h or patch > w:
        raise ContractError(f"patch {patch} exceeds image extents {h}x{w}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    rows = range(0, h - patch + 1, stride)
    cols = range(0, w - patch + 1, stride)
    clean = _target_scores(model, x[None], int(target_class))[0]
    occluded = []
    for top in rows:
        for left in cols:
            variant = x.copy()
            variant[:, top : top + patch, left : left + patch] = 0.0
            occluded.append(variant)
    scores = _target_scores(model, np.stack(occluded), int(target_class))
    field = clean - scores
    return field.reshape(len(rows), len(cols)).astype(np.float32)

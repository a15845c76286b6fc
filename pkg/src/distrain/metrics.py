"""Classification metrics, paired t-test, and the erased-test-set probe.

Per-class precision/recall/F1 use the one-vs-rest reading of the
confusion matrix with the 0/0 -> 0 convention, aggregated both macro
(equal class weight) and weighted (by support). The t-test p-value is
computed in-house through the regularized incomplete beta function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateSampleError
from .rng import derive_rng
from .tensor import Tensor


def confusion(labels, predictions, num_classes: int) -> np.ndarray:
    """K x K count matrix; rows are true classes, columns predictions."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape or labels.ndim != 1:
        raise ContractError(
            f"labels {labels.shape} and predictions {predictions.shape} must be equal-length vectors"
        )
    if len(labels) and (
        labels.min() < 0
        or labels.max() >= num_classes
        or predictions.min() < 0
        or predictions.max() >= num_classes
    ):
        raise ContractError(f"entries must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def basic_metrics(cm: np.ndarray, cls: int) -> tuple[float, float, float, float]:
    """One-vs-rest (precision, recall, F1, accuracy) for one class."""
    total = int(cm.sum())
    if total == 0:
        raise ContractError("confusion matrix is empty")
    tp = int(cm[cls, cls])
    fp = int(cm[:, cls].sum()) - tp
    fn = int(cm[cls, :].sum()) - tp
    tn = total - tp - fp - fn
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    accuracy = (tp + tn) / total
    return precision, recall, f1, accuracy


def aggregate(per_class: list, supports) -> tuple[tuple, tuple]:
    """(macro, weighted) triples over per-class (P, R, F1) triples."""
    supports = np.asarray(supports, dtype=np.float64)
    if len(per_class) != len(supports):
        raise ContractError("one support per class required")
    if np.any(supports < 0):
        raise ContractError("supports must be non-negative")
    total = supports.sum()
    if total == 0:
        raise ContractError("all supports are zero")
    arr = np.asarray(per_class, dtype=np.float64)  # (K, 3)
    macro = tuple(arr.mean(axis=0))
    weighted = tuple((arr * supports[:, None]).sum(axis=0) / total)
    return macro, weighted


_REPORT_KEYS = (
    "accuracy",
    "macro_precision",
    "macro_recall",
    "macro_f1",
    "weighted_precision",
    "weighted_recall",
    "weighted_f1",
)


@dataclass
class EvalReport:
    accuracy: float
    per_class: list  # (precision, recall, f1) per class
    supports: list
    macro: tuple  # (P, R, F1)
    weighted: tuple  # (P, R, F1)

    def values(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro[0],
            "macro_recall": self.macro[1],
            "macro_f1": self.macro[2],
            "weighted_precision": self.weighted[0],
            "weighted_recall": self.weighted[1],
            "weighted_f1": self.weighted[2],
        }

    def to_text(self) -> str:
        lines = [f"{k}={v:.6f}" for k, v in self.values().items()]
        for c, (p, r, f1) in enumerate(self.per_class):
            lines.append(
                f"class{c}_precision={p:.6f}\nclass{c}_recall={r:.6f}\nclass{c}_f1={f1:.6f}"
            )
        return "\n".join(lines) + "\n"

    def to_record(self) -> str:
        vals = self.values()
        return "\t".join(f"{vals[k]:.6f}" for k in _REPORT_KEYS)

    @staticmethod
    def record_header() -> str:
        return "\t".join(_REPORT_KEYS)


def report_from_confusion(cm: np.ndarray) -> EvalReport:
    k = cm.shape[0]
    per_class = [basic_metrics(cm, c)[:3] for c in range(k)]
    supports = [int(cm[c, :].sum()) for c in range(k)]
    macro, weighted = aggregate(per_class, supports)
    accuracy = float(np.trace(cm) / cm.sum())
    return EvalReport(
        accuracy=accuracy,
        per_class=per_class,
        supports=supports,
        macro=macro,
        weighted=weighted,
    )


def evaluate_report(labels, predictions, num_classes: int) -> EvalReport:
    return report_from_confusion(confusion(labels, predictions, num_classes))


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    """Lentz evaluation of the incomplete beta continued fraction."""
    max_iter = 500
    eps = 3e-16
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ContractError("incomplete beta continued fraction failed to converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ContractError(f"beta parameters must be positive, got a={a}, b={b}")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_two_tailed_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for T Student-t with df degrees of freedom."""
    if df < 1:
        raise ContractError(f"degrees of freedom must be >= 1, got {df}")
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def paired_t_test(a, b) -> tuple[float, float]:
    """Paired two-tailed t-test on matched samples.

    t uses the sample standard deviation of the differences (n-1
    denominator); identical-variance-zero differences are rejected.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"paired samples must be equal-length vectors")
    n = len(a)
    if n < 2:
        raise ContractError(f"need at least 2 pairs, got {n}")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateSampleError("degenerate sample: differences have zero variance")
    t = float(d.mean() * math.sqrt(n) / sd)
    return t, student_t_two_tailed_p(t, n - 1)


def random_erase(
    image: Tensor,
    rng: np.random.Generator,
    area_frac: tuple = (0.02, 0.4),
    aspect: tuple = (0.3, 3.3),
) -> Tensor:
    """Zero one random axis-aligned rectangle; never mutates the input.

    The rectangle's area fraction and aspect ratio are drawn from the
    given ranges with rejection sampling; after 100 failed placements the
    image is returned unchanged.
    """
    data = image.data
    if data.ndim != 3:
        raise ContractError(f"random_erase expects (C,H,W), got shape {image.shape}")
    c, h, w = data.shape
    if h < 8 or w < 8:
        raise ContractError(f"image must be at least 8x8, got {h}x{w}")
    lo, hi = float(area_frac[0]), float(area_frac[1])
    alo, ahi = float(aspect[0]), float(aspect[1])
    if not (0.0 <= lo <= hi <= 1.0):
        raise ContractError(f"invalid area fraction range: {area_frac}")
    if not (0.0 < alo <= ahi):
        raise ContractError(f"invalid aspect range: {aspect}")
    out = data.copy()
    for _ in range(100):
        area = float(rng.uniform(lo, hi)) * h * w
        ratio = float(rng.uniform(alo, ahi))
        eh = int(round(math.sqrt(area * ratio)))
        ew = int(round(math.sqrt(area / ratio)))
        if eh == 0 or ew == 0:
            break  # degenerate rectangle: nothing to erase
        if eh <= h and ew <= w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            out[:, top : top + eh, left : left + ew] = 0.0
            break
    return Tensor._wrap(out, False)


def robustness_eval(
    model,
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    seed: int,
    area_frac: tuple = (0.02, 0.4),
    aspect: tuple = (0.3, 3.3),
) -> EvalReport:
    """Evaluate on a randomly-erased copy of the test set.

    Erasure geometry for image i depends only on (seed, i), so every
    model evaluated with the same seed sees identical corruptions.
    """
    from .optim import predict

    erased = np.empty_like(images)
    for i in range(len(images)):
        rng = derive_rng(seed, "erase", i)
        erased[i] = random_erase(
            Tensor._wrap(images[i], False), rng, area_frac, aspect
        ).data
    preds = predict(model, erased)
    return evaluate_report(labels, preds, num_classes)


def erased_copy(
    images: np.ndarray,
    seed: int,
    area_frac: tuple = (0.02, 0.4),
    aspect: tuple = (0.3, 3.3),
) -> np.ndarray:
    """The erased test images themselves (shared across model comparisons)."""
    erased = np.empty_like(images)
    for i in range(len(images)):
        rng = derive_rng(seed, "erase", i)
        erased[i] = random_erase(
            Tensor._wrap(images[i], False), rng, area_frac, aspect
        ).data
    return erased

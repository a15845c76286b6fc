"""Adam, early stopping, and the plain mini-batch training driver.

The epoch pipeline (seeded shuffle, per-image augmentation streams,
validation on clean images, best-checkpoint bookkeeping) lives here and
is shared with the occlusion-gated trainer, which wraps the same step
with its batch-modification phase. Everything is a pure function of
(dataset bytes, config, seed).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Optional

import numpy as np

from .data import augment
from .errors import ContractError, NumericError, StateError
from .layers import Model, softmax_cross_entropy
from .rng import derive_rng
from .tensor import Tape, Tensor, backward


@dataclass
class TrainConfig:
    """Hyper-parameters for one training run, scheme knobs included."""

    batch_size: int = 16
    input_size: int = 64
    lr: float = 0.00005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 0.0000007
    patience: int = 30
    max_epochs: int = 200
    p: float = 0.25
    th: float = 0.85
    occlusion_mode: str = "zero"  # zero | random | one | off
    augment_flip: bool = True
    augment_rotation: float = 40.0
    augment_channel_shift: float = 30.0
    augment_brightness: tuple = (0.5, 1.5)
    seed: int = 42

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.occlusion_mode not in ("zero", "random", "one", "off"):
            raise ContractError(f"unknown occlusion_mode {self.occlusion_mode!r}")
        if self.occlusion_mode != "off" and not (0.0 <= self.p < 1.0):
            raise ContractError(
                f"p must lie in [0, 1) when occlusion is enabled, got {self.p}"
            )
        if not (0.0 < self.th < 1.0):
            raise ContractError(f"th must lie in (0, 1), got {self.th}")
        lo, hi = self.augment_brightness
        if lo > hi:
            raise ContractError(f"brightness range reversed: {lo}:{hi}")
        return self

    def augments_enabled(self) -> bool:
        lo, hi = self.augment_brightness
        return bool(
            self.augment_flip
            or self.augment_rotation > 0
            or self.augment_channel_shift > 0
            or (lo, hi) != (1.0, 1.0)
        )


class AdamState:
    """First/second moment buffers and step counter for a parameter set."""

    def __init__(self, named_params, config: TrainConfig):
        self.lr = config.lr
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in named_params}
        self.v = {name: np.zeros_like(t.data) for name, t in named_params}


def adam_step(named_params, state: AdamState) -> None:
    """One Adam update over all parameters; clears gradients afterwards.

    Gradients are read from each tensor's ``grad`` buffer, so a backward
    pass must precede every step.
    """
    for name, p in named_params:
        if p.grad is None:
            raise StateError(f"adam_step before backward: no gradient for {name}")
        if p.grad.shape != p.data.shape:
            raise ContractError(
                f"gradient shape {p.grad.shape} mismatches parameter {name} {p.data.shape}"
            )
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    bc1 = np.float32(1.0 - state.beta1**state.t)
    bc2 = np.float32(1.0 - state.beta2**state.t)
    lr = np.float32(state.lr)
    eps = np.float32(state.eps)
    for name, p in named_params:
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.clear_grad()


@dataclass
class EarlyStopState:
    patience: int
    best_val_acc: float = -math.inf
    epochs_since_improvement: int = 0
    best_epoch: int = -1


def early_stop_update(state: EarlyStopState, val_acc: float, epoch: int = 0) -> str:
    """Returns "continue" or "stop". Ties count as no improvement."""
    if not (0.0 <= val_acc <= 1.0):
        raise ContractError(f"val_acc must lie in [0,1], got {val_acc}")
    if val_acc > state.best_val_acc:
        state.best_val_acc = val_acc
        state.epochs_since_improvement = 0
        state.best_epoch = epoch
        return "continue"
    state.epochs_since_improvement += 1
    if state.epochs_since_improvement >= state.patience:
        return "stop"
    return "continue"


def epoch_batches(
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    epoch: int,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Seeded reshuffle each epoch; per-image augmentation streams.

    The shuffle stream depends on (seed, epoch) only, and each image's
    augmentation stream on (seed, epoch, original index), so batch
    contents never depend on iteration interleaving.
    """
    order = derive_rng(config.seed, "shuffle", epoch).permutation(len(images))
    do_augment = config.augments_enabled()
    for start in range(0, len(images), config.batch_size):
        sel = order[start : start + config.batch_size]
        batch = images[sel].copy()
        if do_augment:
            for row, src in enumerate(sel):
                rng = derive_rng(config.seed, "augment", epoch, int(src))
                batch[row] = augment(
                    batch[row],
                    rng,
                    flip=config.augment_flip,
                    rotation=config.augment_rotation,
                    channel_shift=config.augment_channel_shift,
                    brightness=config.augment_brightness,
                )
        yield batch, labels[sel]


def train_step(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    adam: AdamState,
) -> tuple[float, int]:
    """Forward, loss, backward, Adam. Returns (loss, correct count)."""
    params = model.named_parameters()
    x = Tensor._wrap(np.ascontiguousarray(images, dtype=np.float32), False)
    with Tape():
        logits = model.forward(x)
        loss = softmax_cross_entropy(logits, labels)
    if not math.isfinite(loss.item()):
        raise NumericError(f"non-finite training loss: {loss.item()}")
    backward(loss)
    adam_step(params, adam)
    correct = int((logits.data.argmax(axis=1) == labels).sum())
    return loss.item(), correct


def train_epoch_baseline(
    model: Model,
    data_iter: Iterable[tuple[np.ndarray, np.ndarray]],
    adam: AdamState,
    config: TrainConfig,
) -> tuple[float, float]:
    """One full pass of plain training steps; returns (mean loss, accuracy)."""
    total_loss = 0.0
    total_correct = 0
    total_seen = 0
    for images, labels in data_iter:
        loss, correct = train_step(model, images, labels, adam)
        total_loss += loss * len(labels)
        total_correct += correct
        total_seen += len(labels)
    if total_seen == 0:
        raise ContractError("training epoch received no batches")
    return total_loss / total_seen, total_correct / total_seen


def predict(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class predictions without tape recording (inference only)."""
    preds = []
    for start in range(0, len(images), batch_size):
        chunk = np.ascontiguousarray(images[start : start + batch_size])
        logits = model.forward(Tensor._wrap(chunk, False))
        preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    if len(images) == 0:
        raise ContractError("cannot evaluate on an empty set")
    return float((predict(model, images) == labels).mean())


@dataclass
class TrainResult:
    model: Model
    best_val_acc: float
    best_epoch: int
    epochs_run: int
    epoch_lines: list = field(default_factory=list)
    step_decisions: list = field(default_factory=list)


def _snapshot(model: Model) -> dict:
    return {name: t.data.copy() for name, t in model.named_parameters()}


def _restore(model: Model, snap: dict) -> None:
    for name, t in model.named_parameters():
        t.data[...] = snap[name]


def run_training(
    model: Model,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    config: TrainConfig,
    epoch_fn: Optional[Callable] = None,
    log_sink: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Epoch loop with validation-accuracy early stopping.

    ``epoch_fn(model, batches, adam, config, epoch)`` must run one epoch
    and return (mean_loss, train_acc, step_decisions). When omitted, the
    plain step is used. Validation always sees clean images. The returned
    model carries the best-validation-epoch weights.
    """
    adam = AdamState(model.named_parameters(), config)
    stopper = EarlyStopState(patience=config.patience)
    best = _snapshot(model)
    result = TrainResult(model=model, best_val_acc=0.0, best_epoch=-1, epochs_run=0)

    for epoch in range(config.max_epochs):
        batches = epoch_batches(train_images, train_labels, config, epoch)
        if epoch_fn is None:
            mean_loss, train_acc = train_epoch_baseline(model, batches, adam, config)
            decisions = []
        else:
            mean_loss, train_acc, decisions = epoch_fn(
                model, batches, adam, config, epoch
            )
        result.step_decisions.extend(decisions)
        val_acc = evaluate_accuracy(model, val_images, val_labels)
        line = f"{epoch}\t{mean_loss:.6f}\t{train_acc:.6f}\t{val_acc:.6f}"
        result.epoch_lines.append(line)
        if log_sink is not None:
            log_sink(line)
        result.epochs_run = epoch + 1
        improved = val_acc > stopper.best_val_acc
        verdict = early_stop_update(stopper, val_acc, epoch)
        if improved:
            best = _snapshot(model)
        if verdict == "stop":
            break

    _restore(model, best)
    result.best_val_acc = 0.0 if stopper.best_epoch < 0 else stopper.best_val_acc
    result.best_epoch = stopper.best_epoch
    return result


def train_baseline(
    model: Model,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    config: TrainConfig,
    log_sink=None,
) -> TrainResult:
    """Classical training: every step sees the batch unchanged."""
    return run_training(
        model, train_images, train_labels, val_images, val_labels, config,
        epoch_fn=None, log_sink=log_sink,
    )

"""Occlusion-gated training: the modified mini-batch step and its driver.

Each step draws one gate variable r in (0,1). When r <= p the whole
batch is rewritten before the gradient step: every image gets a heat map
against its ground-truth label using the weights as they stand at step
start, the map is thresholded, and the selected pixels are occluded.
Originals are never mutated; the gradient step then proceeds on the
(possibly modified) copy exactly as in plain training.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .layers import Model
from .optim import AdamState, TrainConfig, TrainResult, run_training, train_step
from .rng import derive_rng, open_unit_uniform
from .saliency import grad_cam, occlude, threshold_mask
from .tensor import Tensor


@dataclass
class StepDecision:
    """Audit record of one training step's gate outcome."""

    step: int  # global step index within the run
    r: float
    applied: bool
    occluded_fractions: list = field(default_factory=list)

    def log_line(self) -> str:
        mean_frac = (
            sum(self.occluded_fractions) / len(self.occluded_fractions)
            if self.occluded_fractions
            else 0.0
        )
        return f"{self.step}\t{self.r:.6f}\t{int(self.applied)}\t{mean_frac:.6f}"


def occlude_batch(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    epoch: int,
    batch_index: int,
) -> tuple[np.ndarray, list]:
    """Heat-map, threshold and occlude every image of the batch.

    All heat maps come from the same (current) weights; any failure
    aborts the whole batch so no partially occluded batch can train.
    """
    modified = images.copy()
    fractions = []
    for i in range(len(images)):
        heat = grad_cam(model, Tensor._wrap(images[i], False), int(labels[i]))
        mask = threshold_mask(heat, config.th)
        rng = derive_rng(config.seed, "occlude", epoch, batch_index, i)
        occluded = occlude(
            Tensor._wrap(modified[i], False), mask, config.occlusion_mode, rng
        )
        modified[i] = occluded.data
        fractions.append(mask.fraction)
    return modified, fractions


def distraction_step(
    model: Model,
    batch: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    adam: AdamState,
    gate_rng: np.random.Generator,
    epoch: int = 0,
    batch_index: int = 0,
    step_index: int = 0,
    dump: Optional[Callable[[np.ndarray], None]] = None,
) -> tuple[float, int, StepDecision]:
    """One gated step. Returns (loss, correct count, decision record)."""
    images, labels = batch
    r = open_unit_uniform(gate_rng)
    applied = r <= config.p
    fractions: list = []
    if applied and config.occlusion_mode != "off":
        images, fractions = occlude_batch(
            model, images, labels, config, epoch, batch_index
        )
        if dump is not None:
            dump(images)
    loss, correct = train_step(model, images, labels, adam)
    return loss, correct, StepDecision(step_index, r, applied, fractions)


def train_distraction(
    model: Model,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    config: TrainConfig,
    log_sink=None,
    step_log: Optional[Callable[[str], None]] = None,
    dump_dir=None,
    dump_first: int = 0,
) -> TrainResult:
    """Full training driver using the gated step.

    Accepts p = 0 (the gate then never fires and the run matches the
    plain trainer bit for bit under the same seed). Values above 0.5
    leave little clean data per epoch, so they only get a warning.
    """
    if config.p > 0.5:
        warnings.warn(
            f"p={config.p} > 0.5: most steps will train on occluded images",
            stacklevel=2,
        )
    gate_rng = derive_rng(config.seed, "gate")
    state = {"step": 0, "dumped": 0}

    def make_dump(step: int):
        if dump_dir is None or state["dumped"] >= dump_first:
            return None

        def _dump(batch_images: np.ndarray) -> None:
            from .pnm import write_ppm

            for i, img in enumerate(batch_images):
                rgb = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
                write_ppm(f"{dump_dir}/step{step:06d}_img{i:03d}.ppm", rgb)
            state["dumped"] += 1

        return _dump

    def epoch_fn(model, batches, adam, config, epoch):
        total_loss = 0.0
        total_correct = 0
        total_seen = 0
        decisions = []
        for batch_index, (images, labels) in enumerate(batches):
            loss, correct, decision = distraction_step(
                model,
                (images, labels),
                config,
                adam,
                gate_rng,
                epoch=epoch,
                batch_index=batch_index,
                step_index=state["step"],
                dump=make_dump(state["step"]),
            )
            state["step"] += 1
            decisions.append(decision)
            if step_log is not None:
                step_log(decision.log_line())
            total_loss += loss * len(labels)
            total_correct += correct
            total_seen += len(labels)
        return total_loss / total_seen, total_correct / total_seen, decisions

    return run_training(
        model, train_images, train_labels, val_images, val_labels, config,
        epoch_fn=epoch_fn, log_sink=log_sink,
    )

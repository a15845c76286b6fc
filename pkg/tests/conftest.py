"""Shared helpers for gradient checks and reference computations.

Finite differences are only meaningful where the network is
differentiable, so instance generators keep values away from ReLU kinks
and max-pool ties, and the end-to-end checker certifies that no
activation pattern flips between the two distance-eps evaluations before
trusting the difference quotient.
"""

from __future__ import annotations

import numpy as np
import pytest

from distrain.layers import Model


def rel_err(analytic, numeric) -> float:
    """Spec relative error: |a-n| / max(|a|, |n|, 1e-6), worst coordinate."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float(np.max(np.abs(a - n) / denom))


def bounded_signed(rng, shape, lo=0.2, hi=1.5) -> np.ndarray:
    """Magnitudes in [lo, hi] with random sign: no values near 0."""
    mag = rng.uniform(lo, hi, shape)
    sign = rng.choice([-1.0, 1.0], shape)
    return (mag * sign).astype(np.float32)


def bounded_positive(rng, shape, lo=0.2, hi=1.5) -> np.ndarray:
    return rng.uniform(lo, hi, shape).astype(np.float32)


def distinct_grid(rng, shape, lo=0.2, hi=2.0) -> np.ndarray:
    """All-distinct positive values with pairwise gaps >= (hi-lo)/(n-1).

    Keeps max-pool windows tie-free by a margin far larger than the
    finite-difference step.
    """
    n = int(np.prod(shape))
    vals = np.linspace(lo, hi, n)
    return rng.permutation(vals).reshape(shape).astype(np.float32)


# float64 reference forward, independent of the library's tape engine


def _ref_im2col(x, k):
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * k * k), oh, ow


def reference_forward(model: Model, x64: np.ndarray):
    """Float64 forward of a Model; returns (loss_inputs, kink signature).

    The signature is the tuple of every ReLU sign pattern and max-pool
    argmax pattern encountered; two evaluations with identical signatures
    lie in the same linear region of the network.
    """
    h = np.asarray(x64, dtype=np.float64)
    signature = []
    for layer in model.layers:
        if layer.kind == "conv2d":
            cols, oh, ow = _ref_im2col(h, layer.kernel)
            w2 = layer.weight.data.astype(np.float64).reshape(layer.out_channels, -1)
            out = cols @ w2.T + layer.bias.data.astype(np.float64)
            h = out.transpose(0, 2, 1).reshape(h.shape[0], layer.out_channels, oh, ow)
        elif layer.kind == "relu":
            signature.append((h > 0).tobytes())
            h = np.maximum(h, 0.0)
        elif layer.kind == "maxpool2d":
            k, s = layer.kernel, layer.stride
            win = np.lib.stride_tricks.sliding_window_view(h, (k, k), axis=(2, 3))
            win = win[:, :, ::s, ::s, :, :]
            flat = win.reshape(win.shape[:4] + (k * k,))
            signature.append(flat.argmax(axis=4).tobytes())
            h = flat.max(axis=4)
        elif layer.kind == "global_avg_pool":
            h = h.mean(axis=(2, 3))
        elif layer.kind == "flatten":
            h = h.reshape(h.shape[0], -1)
        elif layer.kind == "dense":
            h = h @ layer.weight.data.astype(np.float64) + layer.bias.data.astype(
                np.float64
            )
        else:
            raise AssertionError(f"reference forward: unknown kind {layer.kind}")
    return h, tuple(signature)


def reference_loss(model: Model, x64: np.ndarray, labels) -> tuple[float, tuple]:
    logits, signature = reference_forward(model, x64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(labels)), labels].mean()
    return float(loss), signature


def certified_central_difference(model, x, labels, read, write, eps):
    """Central difference of the reference loss, or None at a kink.

    ``read()``/``write(v)`` access the float32 coordinate under test (a
    parameter or an entry of the input array ``x``, which is re-read on
    every evaluation). The quotient uses the realized float32 step, not
    the nominal eps, since storage quantizes the perturbation. Returns
    None when the two evaluations land in different linear regions,
    where a difference quotient says nothing about the gradient.
    """
    center = read()
    write(center + eps)
    hi = float(read())
    fp, sig_p = reference_loss(model, np.asarray(x, dtype=np.float64), labels)
    write(center - eps)
    lo = float(read())
    fm, sig_m = reference_loss(model, np.asarray(x, dtype=np.float64), labels)
    write(center)
    if sig_p != sig_m or hi == lo:
        return None
    return (fp - fm) / (hi - lo)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)

"""Dense float32 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: enough primitives to train a compact CNN
and to read gradients at an arbitrary interior node (which the heat-map
code needs). Arrays are numpy float32 throughout; there is no broadcasting
beyond multiplying by a python scalar, so shape bugs fail loudly.

Recording model: ops append to the innermost active ``Tape`` whenever any
input requires a gradient. ``backward`` walks that tape once, in reverse
execution order (execution order is already topological), accumulating
gradients additively across fan-out. Gradients persist on tensors until
the optimizer clears them.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, StateError

_ACTIVE_TAPES: list["Tape"] = []


class _Record:
    """One executed primitive: its output, inputs, and derivative rule."""

    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: "Tensor", inputs: tuple, backward_fn: Callable):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed primitives for one forward pass.

    Use as a context manager around the forward computation whose
    gradients you intend to take::

        with Tape():
            loss = model_loss(...)
        backward(loss)
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.pop()


def _active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    """n-dimensional float32 array, optionally participating in the tape.

    ``grad`` is populated by ``backward`` and accumulates across backward
    passes until explicitly cleared (the optimizer does this after each
    step). Values must be finite at construction.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal fast path for op outputs; skips the finiteness scan.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def clear_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Register an executed primitive on the active tape.

    ``backward_fn(g)`` must return one gradient array per input (or None
    for inputs that need no gradient), where ``g`` is the output gradient.
    """
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    tape = _active_tape()
    if tape is not None and needs:
        out.tape = tape
        tape.records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor._wrap(a.data + b.data, False)
    return record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = Tensor._wrap(a.data - b.data, False)
    return record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out = Tensor._wrap(a.data * b.data, False)
    return record(out, (a, b), lambda g: (g * b.data, g * a.data))


def relu(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(a.data, 0.0), False)
    # Subgradient at exactly 0 is 0 by convention.
    mask = a.data > 0
    return record(out, (a,), lambda g: (g * mask,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor._wrap(a.data * np.float32(s), False)
    return record(out, (a,), lambda g: (g * np.float32(s),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch form of the elementwise primitives.

    Binary kinds require b; ``relu`` forbids it; ``scale`` takes the
    scalar factor in place of b.
    """
    if op_kind in _ELEMENTWISE:
        if b is None:
            raise ContractError(f"{op_kind} requires two operands")
        return _ELEMENTWISE[op_kind](a, b)
    if op_kind == "relu":
        if b is not None:
            raise ContractError("relu takes a single operand")
        return relu(a)
    if op_kind == "scale":
        if not isinstance(b, (int, float, np.floating)):
            raise ContractError("scale takes a scalar second operand")
        return scale(a, float(b))
    raise ContractError(f"unknown elementwise kind: {op_kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError(
            f"matmul expects rank-2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    out = Tensor._wrap(a.data @ b.data, False)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return record(out, (a, b), bwd)


def sum_all(a: Tensor) -> Tensor:
    """Reduce to a single-element tensor (shape (1,))."""
    out = Tensor._wrap(a.data.sum(dtype=np.float32).reshape(1), False)

    def bwd(g):
        return (np.full(a.shape, g.reshape(-1)[0], dtype=np.float32),)

    return record(out, (a,), bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = Tensor._wrap(a.data.reshape(shape), False)
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def backward(output: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable on the tape.

    ``output`` must be a single-element tensor recorded on a tape. Each
    record is visited exactly once, in reverse execution order; gradients
    add across fan-out and into any pre-existing ``grad`` buffers.
    """
    if output.data.size != 1:
        raise ContractError(
            f"backward requires a scalar output, got shape {output.shape}"
        )
    tape = output.tape
    if tape is None:
        raise StateError("backward called on a tensor with no recorded forward")

    acc: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    tensors: dict[int, Tensor] = {id(output): output}

    for rec in reversed(tape.records):
        g = acc.get(id(rec.output))
        if g is None:
            continue
        grads_in = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, grads_in):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in acc:
                acc[key] = acc[key] + gi
            else:
                acc[key] = np.asarray(gi, dtype=np.float32)
                tensors[key] = t
        # Record inputs so untouched requires_grad tensors still get zeros.
        for t in rec.inputs:
            tensors.setdefault(id(t), t)

    for key, t in tensors.items():
        if not t.requires_grad:
            continue
        gi = acc.get(key)
        if gi is None:
            gi = np.zeros_like(t.data)
        gi = np.asarray(gi, dtype=np.float32)
        t.grad = gi if t.grad is None else t.grad + gi


def finite_difference_oracle(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float
) -> Tensor:
    """Central-difference gradient estimate of scalar f at x.

    Independent of the tape: f is re-evaluated 2N times on perturbed
    copies of x. The caller compares against analytic gradients.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    base = x.data.astype(np.float32)
    out = np.zeros(base.size, dtype=np.float64)
    for i in range(base.size):
        plus = base.copy()
        plus.flat[i] += np.float32(eps)
        minus = base.copy()
        minus.flat[i] -= np.float32(eps)
        fp = float(f(Tensor._wrap(plus, False)).data.reshape(-1)[0])
        fm = float(f(Tensor._wrap(minus, False)).data.reshape(-1)[0])
        out[i] = (fp - fm) / (2.0 * eps)
    return Tensor(out.reshape(base.shape).astype(np.float32))

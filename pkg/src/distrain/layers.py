"""Convolutional building blocks and the reference classifier.

All spatial ops take (N, C, H, W) float32 tensors. Convolution is
cross-correlation (no kernel flip) with valid-or-zero padding; output
extents follow floor((in + 2*pad - k)/stride) + 1. The reference net
("SmallCamNet") keeps its final conv layer addressable so heat-map code
can read that layer's activations and gradients.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, StateError
from .rng import derive_rng
from .tensor import Tensor, record


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold (N,C,H,W) into (N, C*kh*kw, oh*ow) patch columns."""
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, pad: int):
    """Scatter-add patch columns back onto the (padded) input grid."""
    n, c, h, w = x_shape
    oh = _out_extent(h, kh, stride, pad)
    ow = _out_extent(w, kw, stride, pad)
    buf = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    patches = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                patches[:, :, i, j]
            )
    if pad > 0:
        return buf[:, :, pad:-pad, pad:-pad]
    return buf


class Conv2d:
    kind = "conv2d"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        rng: Optional[np.random.Generator] = None,
    ):
        if padding < 0 or stride < 1:
            raise ContractError(
                f"conv2d requires padding >= 0 and stride >= 1, got {padding}, {stride}"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        if rng is None:
            w = np.zeros((out_channels, in_channels, kernel, kernel), dtype=np.float32)
        else:
            w = rng.normal(0.0, std, (out_channels, in_channels, kernel, kernel))
        self.weight = Tensor(w.astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def descriptor(self) -> str:
        return (
            f"conv2d:{self.in_channels}:{self.out_channels}:{self.kernel}"
            f":{self.stride}:{self.padding}"
        )

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_forward(x, self)


def conv2d_forward(x: Tensor, layer: Conv2d) -> Tensor:
    if x.data.ndim != 4:
        raise ContractError(f"conv2d expects (N,C,H,W), got shape {x.shape}")
    n, c, h, w = x.shape
    if c != layer.in_channels:
        raise ContractError(
            f"conv2d: input has {c} channels, layer expects {layer.in_channels}"
        )
    k, stride, pad = layer.kernel, layer.stride, layer.padding
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ContractError(f"conv2d: kernel {k} exceeds padded input {h}x{w}")
    cols, oh, ow = _im2col(x.data, k, k, stride, pad)
    w2 = layer.weight.data.reshape(layer.out_channels, -1)
    out = np.matmul(w2[None, :, :], cols) + layer.bias.data[None, :, None]
    out = out.reshape(n, layer.out_channels, oh, ow)

    weight, bias = layer.weight, layer.bias

    def bwd(g):
        g2 = g.reshape(n, layer.out_channels, oh * ow)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
        db = g2.sum(axis=(0, 2))
        dx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T[None, :, :], g2)
            dx = _col2im(dcols, x.shape, k, k, stride, pad)
        return dx, dw.reshape(weight.shape).astype(np.float32), db.astype(np.float32)

    return record(Tensor._wrap(out.astype(np.float32), False), (x, weight, bias), bwd)


class MaxPool2d:
    kind = "maxpool2d"

    def __init__(self, kernel: int, stride: Optional[int] = None):
        self.kernel = kernel
        self.stride = stride if stride is not None else kernel

    def parameters(self):
        return []

    def descriptor(self) -> str:
        return f"maxpool2d:{self.kernel}:{self.stride}"

    def forward(self, x: Tensor) -> Tensor:
        return maxpool2d(x, self.kernel, self.stride)


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    if x.data.ndim != 4:
        raise ContractError(f"maxpool2d expects (N,C,H,W), got shape {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ContractError(f"maxpool2d: window {k} larger than input {h}x{w}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1

    if stride == k:
        # Non-overlapping fast path: disjoint windows via a reshape.
        ch, cw = oh * k, ow * k
        win = x.data[:, :, :ch, :cw].reshape(n, c, oh, k, ow, k)
        out = win.max(axis=(3, 5))

        def bwd(g):
            flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
            # first occurrence in row-major window order wins ties
            arg = flat.argmax(axis=4)
            scat = np.zeros_like(flat)
            np.put_along_axis(scat, arg[..., None], g[..., None], axis=4)
            dx = np.zeros_like(x.data)
            dx[:, :, :ch, :cw] = (
                scat.reshape(n, c, oh, ow, k, k)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, ch, cw)
            )
            return (dx,)

        return record(Tensor._wrap(np.ascontiguousarray(out), False), (x,), bwd)

    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    flat = win.reshape(n, c, oh, ow, k * k)
    arg = flat.argmax(axis=4)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]

    def bwd(g):
        # Overlapping windows may hit the same cell; add.at accumulates.
        dx = np.zeros_like(x.data)
        ni, ci, hi, wi = np.indices((n, c, oh, ow), sparse=False)
        rows = hi * stride + arg // k
        cols_ = wi * stride + arg % k
        np.add.at(dx, (ni, ci, rows, cols_), g)
        return (dx,)

    return record(Tensor._wrap(np.ascontiguousarray(out), False), (x,), bwd)


class GlobalAvgPool:
    kind = "global_avg_pool"

    def parameters(self):
        return []

    def descriptor(self) -> str:
        return "gap"

    def forward(self, x: Tensor) -> Tensor:
        return global_avg_pool(x)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ContractError(f"global_avg_pool expects (N,C,H,W), got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float32)

    def bwd(g):
        spread = np.broadcast_to(
            (g / np.float32(h * w))[:, :, None, None], x.shape
        ).astype(np.float32)
        return (spread,)

    return record(Tensor._wrap(out, False), (x,), bwd)


class ReLU:
    kind = "relu"

    def parameters(self):
        return []

    def descriptor(self) -> str:
        return "relu"

    def forward(self, x: Tensor) -> Tensor:
        from .tensor import relu

        return relu(x)


class Flatten:
    kind = "flatten"

    def parameters(self):
        return []

    def descriptor(self) -> str:
        return "flatten"

    def forward(self, x: Tensor) -> Tensor:
        from .tensor import reshape

        return reshape(x, (x.shape[0], -1))


class Dense:
    kind = "dense"

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: Optional[np.random.Generator] = None,
    ):
        self.in_features = in_features
        self.out_features = out_features
        std = np.sqrt(2.0 / in_features)
        if rng is None:
            w = np.zeros((in_features, out_features), dtype=np.float32)
        else:
            w = rng.normal(0.0, std, (in_features, out_features))
        self.weight = Tensor(w.astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def descriptor(self) -> str:
        return f"dense:{self.in_features}:{self.out_features}"

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise ContractError(
                f"dense expects (N,{self.in_features}), got shape {x.shape}"
            )
        out = x.data @ self.weight.data + self.bias.data[None, :]
        weight, bias = self.weight, self.bias

        def bwd(g):
            dx = g @ weight.data.T if x.requires_grad else None
            return dx, x.data.T @ g, g.sum(axis=0)

        return record(Tensor._wrap(out.astype(np.float32), False), (x, weight, bias), bwd)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Stabilized by row-max subtraction. Returns a scalar tensor of shape (1,).
    """
    if logits.data.ndim != 2:
        raise ContractError(f"softmax_cross_entropy expects (N,K), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ContractError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    softmax = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean(dtype=np.float32)

    def bwd(g):
        onehot = np.zeros((n, k), dtype=np.float32)
        onehot[np.arange(n), labels] = 1.0
        return ((softmax - onehot) * (g.reshape(-1)[0] / np.float32(n)),)

    return record(Tensor._wrap(np.array([loss], dtype=np.float32), False), (logits,), bwd)


_POST_CONV_KINDS = {"maxpool2d", "global_avg_pool", "dense", "relu", "flatten"}


class Model:
    """Ordered layer pipeline with an addressable final conv layer.

    After a forward with ``capture=True`` the final conv layer's output
    tensor is cached; after a subsequent backward pass its ``grad`` holds
    the gradient of the backward target w.r.t. those feature maps.
    """

    def __init__(self, layers: list):
        if not layers:
            raise ContractError("model requires at least one layer")
        self.layers = layers
        conv_idxs = [i for i, l in enumerate(layers) if l.kind == "conv2d"]
        if not conv_idxs:
            raise ContractError("model has no conv2d layer to expose")
        self.last_conv = conv_idxs[-1]
        for layer in layers[self.last_conv + 1 :]:
            if layer.kind not in _POST_CONV_KINDS:
                raise ContractError(
                    f"layer kind {layer.kind!r} not allowed after the final conv layer"
                )
        self.captured_activation: Optional[Tensor] = None

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def num_classes(self) -> int:
        for layer in reversed(self.layers):
            if layer.kind == "dense":
                return layer.out_features
        raise ContractError("model has no dense layer")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            for pname, tensor in layer.parameters():
                out.append((f"layer{i}.{pname}", tensor))
        return out

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def descriptor(self) -> str:
        return ",".join(layer.descriptor() for layer in self.layers)

    @classmethod
    def from_descriptor(cls, desc: str) -> "Model":
        layers: list = []
        for part in desc.split(","):
            fields = part.split(":")
            kind = fields[0]
            if kind == "conv2d":
                cin, cout, k, s, p = (int(v) for v in fields[1:6])
                layers.append(Conv2d(cin, cout, k, stride=s, padding=p))
            elif kind == "maxpool2d":
                layers.append(MaxPool2d(int(fields[1]), int(fields[2])))
            elif kind == "gap":
                layers.append(GlobalAvgPool())
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "flatten":
                layers.append(Flatten())
            elif kind == "dense":
                layers.append(Dense(int(fields[1]), int(fields[2])))
            else:
                raise ContractError(f"unknown layer kind in descriptor: {kind!r}")
        return cls(layers)

    def clone(self) -> "Model":
        m = Model.from_descriptor(self.descriptor())
        for (_, src), (_, dst) in zip(self.named_parameters(), m.named_parameters()):
            dst.data[...] = src.data
        return m

    def forward(self, x: Tensor, capture: bool = False) -> Tensor:
        return forward_with_capture(self, x, capture)


def forward_with_capture(model: Model, x: Tensor, capture: bool = False) -> Tensor:
    """Run the pipeline; optionally cache the final conv layer's output."""
    if x.data.ndim != 4 or x.shape[1] != model.in_channels:
        raise ContractError(
            f"model expects (N,{model.in_channels},H,W) input, got shape {x.shape}"
        )
    if capture:
        model.captured_activation = None
    out = x
    for i, layer in enumerate(model.layers):
        out = layer.forward(out)
        if capture and i == model.last_conv:
            model.captured_activation = out
    return out


def build_small_cam_net(in_channels: int, num_classes: int, seed: int) -> Model:
    """Reference topology: three valid 3x3 conv stages, GAP, linear head.

    He-initialized from streams derived from the seed; identical seeds
    give bit-identical parameters. For 64x64 input the final conv feature
    maps are 12x12.
    """
    if num_classes < 2:
        raise ContractError(f"num_classes must be >= 2, got {num_classes}")
    rngs = [derive_rng(seed, "init", i) for i in range(4)]
    layers = [
        Conv2d(in_channels, 16, 3, rng=rngs[0]),
        ReLU(),
        MaxPool2d(2),
        Conv2d(16, 32, 3, rng=rngs[1]),
        ReLU(),
        MaxPool2d(2),
        Conv2d(32, 64, 3, rng=rngs[2]),
        ReLU(),
        GlobalAvgPool(),
        Dense(64, num_classes, rng=rngs[3]),
    ]
    return Model(layers)

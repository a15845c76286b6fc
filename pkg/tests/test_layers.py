"""Layer ops against naive oracles, finite differences, and shape algebra."""

import numpy as np
import pytest

from distrain.errors import ContractError
from distrain.layers import (
    Conv2d,
    Dense,
    GlobalAvgPool,
    MaxPool2d,
    Model,
    ReLU,
    build_small_cam_net,
    conv2d_forward,
    forward_with_capture,
    global_avg_pool,
    maxpool2d,
    softmax_cross_entropy,
)
from distrain.tensor import Tape, Tensor, backward, finite_difference_oracle, mul, sum_all

from conftest import (
    bounded_positive,
    bounded_signed,
    certified_central_difference,
    distinct_grid,
    rel_err,
    reference_loss,
)

EPS = 2e-2
TOL = 1e-3


# naive oracles, written before the vectorized implementations were tested


def naive_conv2d(x, weight, bias, stride, pad):
    """Direct six-nested-loop cross-correlation."""
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    for ni in range(n):
        for oi in range(oc):
            for yi in range(oh):
                for xi in range(ow):
                    acc = 0.0
                    for ci in range(ic):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (
                                    xp[ni, ci, yi * stride + ky, xi * stride + kx]
                                    * weight[oi, ci, ky, kx]
                                )
                    out[ni, oi, yi, xi] = acc + bias[oi]
    return out


def naive_maxpool(x, k, stride):
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for yi in range(oh):
                for xi in range(ow):
                    out[ni, ci, yi, xi] = x[
                        ni, ci, yi * stride : yi * stride + k, xi * stride : xi * stride + k
                    ].max()
    return out


def make_conv(in_c, out_c, k, stride=1, padding=0, weight=None, bias=None):
    layer = Conv2d(in_c, out_c, k, stride=stride, padding=padding)
    if weight is not None:
        layer.weight.data[...] = weight
    if bias is not None:
        layer.bias.data[...] = bias
    return layer


def test_conv_1x1_identity():
    layer = make_conv(1, 1, 1, weight=np.ones((1, 1, 1, 1), np.float32))
    x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
    out = conv2d_forward(x, layer)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_all_ones_valid():
    layer = make_conv(1, 1, 3, weight=np.ones((1, 1, 3, 3), np.float32))
    x = Tensor(np.ones((1, 1, 3, 3), np.float32))
    out = conv2d_forward(x, layer)
    np.testing.assert_array_equal(out.data, [[[[9.0]]]])


@pytest.mark.parametrize("seed", range(10))
def test_conv_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    k = int(rng.integers(1, 4))
    x = bounded_signed(rng, (2, 3, 6, 7))
    w = bounded_signed(rng, (4, 3, k, k))
    b = bounded_signed(rng, (4,))
    layer = make_conv(3, 4, k, stride=stride, padding=pad, weight=w, bias=b)
    out = conv2d_forward(Tensor(x), layer)
    expect = naive_conv2d(x, w, b, stride, pad)
    np.testing.assert_allclose(out.data, expect, rtol=1e-5, atol=1e-5)


def test_conv_channel_mismatch():
    layer = make_conv(3, 4, 3)
    with pytest.raises(ContractError, match="channels"):
        conv2d_forward(Tensor(np.ones((1, 2, 5, 5), np.float32)), layer)


def test_conv_output_extent_formula():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h = int(rng.integers(4, 12))
        w = int(rng.integers(4, 12))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 3))
        if h + 2 * pad < k or w + 2 * pad < k:
            continue
        layer = make_conv(1, 1, k, stride=stride, padding=pad)
        out = conv2d_forward(Tensor(np.ones((1, 1, h, w), np.float32)), layer)
        assert out.shape[2] == (h + 2 * pad - k) // stride + 1
        assert out.shape[3] == (w + 2 * pad - k) // stride + 1


@pytest.mark.parametrize("seed", range(10))
def test_conv_backward_matches_oracle(seed):
    # positive weights, inputs and mix keep every nonzero gradient
    # coordinate bounded away from the float32 noise floor
    rng = np.random.default_rng(seed)
    w = bounded_positive(rng, (3, 2, 3, 3), lo=0.1, hi=0.6)
    b = bounded_positive(rng, (3,), lo=0.1, hi=0.3)
    mix = Tensor(bounded_positive(rng, (1, 3, 3, 3), lo=0.5))
    x_data = bounded_positive(rng, (1, 2, 5, 5))
    layer = make_conv(2, 3, 3, weight=w, bias=b)

    def f_x(t):
        return sum_all(mul(conv2d_forward(t, layer), mix))

    x = Tensor(x_data, requires_grad=True)
    with Tape():
        y = f_x(x)
    backward(y)
    assert rel_err(x.grad, finite_difference_oracle(f_x, Tensor(x_data), EPS).data) <= TOL
    assert rel_err(
        layer.weight.grad,
        finite_difference_oracle(
            lambda wt: sum_all(
                mul(
                    conv2d_forward(
                        Tensor(x_data), make_conv(2, 3, 3, weight=wt.data, bias=b)
                    ),
                    mix,
                )
            ),
            Tensor(w),
            EPS,
        ).data,
    ) <= TOL
    assert rel_err(
        layer.bias.grad,
        finite_difference_oracle(
            lambda bt: sum_all(
                mul(
                    conv2d_forward(
                        Tensor(x_data), make_conv(2, 3, 3, weight=w, bias=bt.data)
                    ),
                    mix,
                )
            ),
            Tensor(b),
            EPS,
        ).data,
    ) <= TOL


# max pooling


def test_maxpool_example():
    out = maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])


def test_maxpool_window_too_large():
    with pytest.raises(ContractError, match="larger"):
        maxpool2d(Tensor(np.ones((1, 1, 2, 2), np.float32)), 3, 1)


def test_maxpool_tie_routes_to_first():
    x = Tensor(np.full((1, 1, 2, 2), 7.0, dtype=np.float32), requires_grad=True)
    with Tape():
        y = sum_all(maxpool2d(x, 2, 2))
    backward(y)
    np.testing.assert_array_equal(
        x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]]
    )


def test_maxpool_tie_rule_overlapping_path():
    x = Tensor(np.full((1, 1, 3, 3), 2.0, dtype=np.float32), requires_grad=True)
    with Tape():
        y = sum_all(maxpool2d(x, 2, 1))
    backward(y)
    # four windows, each routing to its own top-left corner
    np.testing.assert_array_equal(
        x.grad, [[[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]]]]
    )


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("k,stride", [(2, 2), (2, 1), (3, 2)])
def test_maxpool_matches_naive_oracle(seed, k, stride):
    x = distinct_grid(np.random.default_rng(seed), (2, 3, 6, 7))
    out = maxpool2d(Tensor(x), k, stride)
    np.testing.assert_array_equal(out.data, naive_maxpool(x, k, stride))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("k,stride", [(2, 2), (2, 1)])
def test_maxpool_backward_matches_oracle(seed, k, stride):
    rng = np.random.default_rng(seed)
    x_data = distinct_grid(rng, (1, 2, 6, 6))
    oh = (6 - k) // stride + 1
    mix = Tensor(bounded_positive(rng, (1, 2, oh, oh), lo=0.5))

    def f(t):
        return sum_all(mul(maxpool2d(t, k, stride), mix))

    x = Tensor(x_data, requires_grad=True)
    with Tape():
        y = f(x)
    backward(y)
    numeric = finite_difference_oracle(f, Tensor(x_data), EPS)
    assert rel_err(x.grad, numeric.data) <= TOL


# global average pooling


def test_gap_constant_map():
    out = global_avg_pool(Tensor(np.full((1, 2, 3, 3), 5.0, np.float32)))
    np.testing.assert_array_equal(out.data, [[5.0, 5.0]])


def test_gap_example():
    out = global_avg_pool(Tensor([[[[1.0, 3.0], [5.0, 7.0]]]]))
    np.testing.assert_array_equal(out.data, [[4.0]])


@pytest.mark.parametrize("seed", range(10))
def test_gap_backward_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    x_data = bounded_signed(rng, (2, 3, 4, 4))
    mix = Tensor(bounded_positive(rng, (2, 3), lo=0.5))

    def f(t):
        return sum_all(mul(global_avg_pool(t), mix))

    x = Tensor(x_data, requires_grad=True)
    with Tape():
        y = f(x)
    backward(y)
    numeric = finite_difference_oracle(f, Tensor(x_data), EPS)
    assert rel_err(x.grad, numeric.data) <= TOL
    # gradient spreads g/(H*W) to every cell
    np.testing.assert_allclose(
        x.grad, np.broadcast_to(mix.data[:, :, None, None], x_data.shape) / 16.0,
        rtol=1e-6,
    )


# softmax cross-entropy


def test_softmax_ce_uniform_logits():
    logits = Tensor(np.zeros((3, 4), np.float32))
    loss = softmax_cross_entropy(logits, [0, 1, 2])
    np.testing.assert_allclose(loss.item(), np.log(4.0), rtol=1e-6)


def test_softmax_ce_dominant_logit_loss_to_zero():
    logits = np.zeros((1, 3), np.float32)
    logits[0, 1] = 30.0
    loss = softmax_cross_entropy(Tensor(logits), [1])
    assert loss.item() < 1e-6


def test_softmax_ce_label_range():
    with pytest.raises(ContractError):
        softmax_cross_entropy(Tensor(np.zeros((1, 3), np.float32)), [3])


@pytest.mark.parametrize("seed", range(10))
def test_softmax_ce_backward_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    x_data = bounded_signed(rng, (3, 4))
    labels = rng.integers(0, 4, 3)

    def f(t):
        return softmax_cross_entropy(t, labels)

    x = Tensor(x_data, requires_grad=True)
    with Tape():
        y = f(x)
    backward(y)
    numeric = finite_difference_oracle(f, Tensor(x_data), EPS)
    assert rel_err(x.grad, numeric.data) <= TOL
    # closed form (softmax - onehot)/N
    z = x_data - x_data.max(axis=1, keepdims=True)
    soft = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    onehot = np.zeros_like(soft)
    onehot[np.arange(3), labels] = 1
    np.testing.assert_allclose(x.grad, (soft - onehot) / 3.0, atol=1e-6)


# dense


@pytest.mark.parametrize("seed", range(10))
def test_dense_backward_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    layer = Dense(5, 3)
    layer.weight.data[...] = bounded_positive(rng, (5, 3), lo=0.1, hi=0.6)
    layer.bias.data[...] = bounded_positive(rng, (3,), lo=0.1, hi=0.3)
    mix = Tensor(bounded_positive(rng, (2, 3), lo=0.5))
    x_data = bounded_positive(rng, (2, 5))

    def f(t):
        return sum_all(mul(layer.forward(t), mix))

    x = Tensor(x_data, requires_grad=True)
    with Tape():
        y = f(x)
    backward(y)
    numeric = finite_difference_oracle(f, Tensor(x_data), EPS)
    assert rel_err(x.grad, numeric.data) <= TOL


# reference net


def test_small_cam_net_deterministic():
    m1 = build_small_cam_net(3, 4, seed=9)
    m2 = build_small_cam_net(3, 4, seed=9)
    for (n1, t1), (n2, t2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert n1 == n2
        assert t1.data.tobytes() == t2.data.tobytes()
    m3 = build_small_cam_net(3, 4, seed=10)
    assert any(
        t1.data.tobytes() != t3.data.tobytes()
        for (_, t1), (_, t3) in zip(m1.named_parameters(), m3.named_parameters())
    )


def test_small_cam_net_logit_shape():
    m = build_small_cam_net(3, 5, seed=0)
    out = m.forward(Tensor(np.zeros((2, 3, 64, 64), np.float32)))
    assert out.shape == (2, 5)


def test_small_cam_net_last_conv_extent_64():
    # 64 -> 62 -> 31 -> 29 -> 14 -> 12 by the output-extent formula
    m = build_small_cam_net(3, 4, seed=0)
    m.forward(Tensor(np.zeros((1, 3, 64, 64), np.float32)), capture=True)
    assert m.captured_activation.shape == (1, 64, 12, 12)


def test_small_cam_net_parameter_count():
    # conv(16,3x3,cin) + conv(32,3x3,16) + conv(64,3x3,32) + dense(64,K)
    for cin, k in [(3, 4), (1, 2), (3, 10)]:
        expect = (
            16 * cin * 9 + 16
            + 32 * 16 * 9 + 32
            + 64 * 32 * 9 + 64
            + 64 * k + k
        )
        assert build_small_cam_net(cin, k, seed=0).parameter_count() == expect


def test_small_cam_net_he_initialization_stats():
    m = build_small_cam_net(3, 4, seed=3)
    conv2 = m.layers[3]
    std = conv2.weight.data.std()
    assert abs(std - np.sqrt(2.0 / (16 * 9))) < 0.01
    for _, t in m.named_parameters():
        if t.data.ndim == 1:
            np.testing.assert_array_equal(t.data, 0.0)


def test_num_classes_requires_two():
    with pytest.raises(ContractError):
        build_small_cam_net(3, 1, seed=0)


# capture contract


def test_capture_false_leaves_cache_empty():
    m = build_small_cam_net(3, 4, seed=0)
    m.forward(Tensor(np.zeros((1, 3, 32, 32), np.float32)), capture=False)
    assert m.captured_activation is None


def test_capture_matches_sliced_forward():
    m = build_small_cam_net(3, 4, seed=1)
    x = bounded_positive(np.random.default_rng(0), (1, 3, 32, 32), lo=0.0, hi=1.0)
    forward_with_capture(m, Tensor(x), capture=True)
    captured = m.captured_activation.data.copy()
    # recompute by slicing the pipeline at the exposed conv layer
    h = Tensor(x)
    for layer in m.layers[: m.last_conv + 1]:
        h = layer.forward(h)
    np.testing.assert_array_equal(captured, h.data)


def test_model_input_channel_contract():
    m = build_small_cam_net(3, 4, seed=0)
    with pytest.raises(ContractError):
        m.forward(Tensor(np.zeros((1, 1, 32, 32), np.float32)))


def test_model_descriptor_round_trip():
    m = build_small_cam_net(3, 4, seed=0)
    rebuilt = Model.from_descriptor(m.descriptor())
    assert rebuilt.descriptor() == m.descriptor()
    assert rebuilt.last_conv == m.last_conv
    assert rebuilt.parameter_count() == m.parameter_count()


class _OddLayer:
    kind = "normalize"

    def parameters(self):
        return []


def test_model_rejects_conv_free_pipelines():
    with pytest.raises(ContractError):
        Model([Dense(4, 2)])
    with pytest.raises(ContractError, match="not allowed after"):
        Model([Conv2d(1, 2, 3), _OddLayer(), GlobalAvgPool(), Dense(2, 2)])


# end-to-end gradient check against a float64 reference, certified to
# stay inside one linear region of the piecewise-linear network


def test_end_to_end_loss_gradients_match_central_differences():
    eps = 1e-4
    checked = 0
    for seed in range(4):
        rng = np.random.default_rng(seed)
        model = build_small_cam_net(3, 3, seed=seed)
        x = rng.uniform(0.0, 1.0, (2, 3, 20, 20)).astype(np.float32)
        labels = rng.integers(0, 3, 2)

        x_t = Tensor(x, requires_grad=True)
        with Tape():
            loss = softmax_cross_entropy(model.forward(x_t), labels)
        backward(loss)
        # library float32 loss agrees with the float64 reference
        ref, _ = reference_loss(model, x.astype(np.float64), labels)
        assert abs(loss.item() - ref) < 1e-4

        for name, tensor in model.named_parameters() + [("input", x_t)]:
            analytic = tensor.grad
            coords = rng.choice(tensor.data.size, size=min(6, tensor.data.size), replace=False)
            for ci in coords:
                def read(t=tensor, ci=ci):
                    return float(t.data.flat[ci])

                def write(v, t=tensor, ci=ci):
                    t.data.flat[ci] = v

                numeric = certified_central_difference(
                    model, x, labels, read, write, eps
                )
                if numeric is None:
                    continue  # kink between the two evaluations: FD invalid
                a = float(analytic.flat[ci])
                assert rel_err(np.array([a]), np.array([numeric])) <= TOL, (
                    f"seed {seed} {name}[{ci}]: analytic {a} vs numeric {numeric}"
                )
                checked += 1
    assert checked >= 150  # certified coordinates across instances

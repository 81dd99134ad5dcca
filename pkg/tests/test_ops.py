import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nrd import gradcheck, ops
from nrd.ops import ContractError, ConvSpec


def naive_conv(x, w, b, stride, pad):
    h, wd, cin = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = b[o]
                for a in range(k):
                    for c in range(k):
                        y, xx = i * stride + a - pad, j * stride + c - pad
                        if 0 <= y < h and 0 <= xx < wd:
                            acc += np.dot(w[o, :, a, c], x[y, xx])
                out[i, j, o] = acc
    return out


def naive_bilinear(x, oh, ow):
    h, w, c = x.shape
    out = np.zeros((oh, ow, c))
    for i in range(oh):
        sy = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        ty = sy - y0
        for j in range(ow):
            sx = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            tx = sx - x0
            for ch in range(c):
                top = x[y0, x0, ch] * (1 - tx) + x[y0, x1, ch] * tx
                bot = x[y1, x0, ch] * (1 - tx) + x[y1, x1, ch] * tx
                out[i, j, ch] = top * (1 - ty) + bot * ty
    return out


# ---------------------------------------------------------------------- conv


def test_identity_1x1():
    x = np.random.default_rng(0).standard_normal((4, 5, 3))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = ops.conv2d(x, ConvSpec(3, 3, 1), w, np.zeros(3))
    np.testing.assert_array_equal(out, x)


def test_ones_kernel_counts_neighbours():
    out = ops.conv2d(np.ones((5, 5, 1)), ConvSpec(1, 1, 3), np.ones((1, 1, 3, 3)), np.zeros(1))[..., 0]
    assert np.all(out[1:-1, 1:-1] == 9)
    assert out[0, 0] == out[0, -1] == out[-1, 0] == out[-1, -1] == 4
    assert np.all(out[0, 1:-1] == 6)


def test_delta_kernel_shifts_left():
    x = np.arange(20.0).reshape(4, 5, 1)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 2] = 1.0
    out = ops.conv2d(x, ConvSpec(1, 1, 3), w, np.zeros(1))[..., 0]
    expected = np.zeros((4, 5))
    expected[:, :-1] = x[:, 1:, 0]
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2), (1, 2)])
def test_conv_matches_direct_summation(k, stride):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.standard_normal((7, 6, 3))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = ops.conv2d(x, ConvSpec(3, 4, k, stride), w, b)
    np.testing.assert_allclose(out, naive_conv(x, w, b, stride, (k - 1) // 2), atol=1e-12)
    assert out.shape[:2] == ((7 + 2 * ((k - 1) // 2) - k) // stride + 1, (6 + 2 * ((k - 1) // 2) - k) // stride + 1)


def test_1x1_conv_is_matrix_product():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 5, 4))
    w = rng.standard_normal((7, 4, 1, 1))
    out = ops.conv2d(x, ConvSpec(4, 7, 1), w, np.zeros(7))
    oracle = (x.reshape(-1, 4) @ w[:, :, 0, 0].T).reshape(6, 5, 7)
    np.testing.assert_allclose(out, oracle, atol=1e-6)


def test_conv_batch_equals_single():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 8, 8, 2))
    w, b = rng.standard_normal((5, 2, 3, 3)), rng.standard_normal(5)
    spec = ConvSpec(2, 5, 3, 2)
    batched = ops.conv2d(x, spec, w, b)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], ops.conv2d(x[i], spec, w, b))


def test_conv_shape_errors():
    with pytest.raises(ContractError):
        ops.conv2d(np.zeros((4, 4, 2)), ConvSpec(3, 1, 1), np.zeros((1, 3, 1, 1)), np.zeros(1))
    with pytest.raises(ContractError):
        ops.conv2d(np.zeros((4, 4, 3)), ConvSpec(3, 1, 3), np.zeros((1, 3, 1, 1)), np.zeros(1))
    with pytest.raises(ContractError):
        ConvSpec(1, 1, kernel=5)


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 5, 2))
    spec = ConvSpec(2, 3, 3, 2)
    g = ops.conv2d_grad(x, spec, rng.standard_normal(spec.weight_shape), np.zeros(3), np.zeros((3, 3, 3)))
    assert not g.d_input.any() and not g.d_weights.any() and not g.d_bias.any()
    assert g.d_input.shape == x.shape and g.d_weights.shape == spec.weight_shape and g.d_bias.shape == (3,)


def test_conv_deterministic():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 16, 16, 3)).astype(np.float32)
    w = rng.standard_normal((8, 3, 3, 3)).astype(np.float32)
    b = np.zeros(8, np.float32)
    a1 = ops.conv2d(x, ConvSpec(3, 8, 3, 2), w, b)
    a2 = ops.conv2d(x, ConvSpec(3, 8, 3, 2), w, b)
    assert a1.tobytes() == a2.tobytes()


# ---------------------------------------------------------------------- relu


def test_relu_values():
    np.testing.assert_array_equal(ops.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert not ops.relu(-np.ones((3, 3))).any()
    np.testing.assert_array_equal(ops.relu_grad(np.array([-1.0, 0.0, 2.0]), np.ones(3)), [0, 0, 1])


# ------------------------------------------------------------ bilinear resize


def test_bilinear_constant():
    out = ops.bilinear_resize(np.full((3, 4, 2), 5.0), 11, 7)
    assert np.all(out == 5.0)


def test_bilinear_identity_is_bit_exact():
    x = np.random.default_rng(5).standard_normal((6, 7, 3))
    out = ops.bilinear_resize(x, 6, 7)
    assert out.tobytes() == x.tobytes() and out is not x


def test_bilinear_2x2_against_scalar_oracle():
    x = np.array([[0.0, 2.0], [2.0, 0.0]])[..., None]
    out = ops.bilinear_resize(x, 4, 4)
    assert out[0, 0, 0] == 0 and out[0, 3, 0] == 2 and out[3, 0, 0] == 2 and out[3, 3, 0] == 0
    np.testing.assert_allclose(out, naive_bilinear(x, 4, 4), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), oh=st.integers(1, 20), ow=st.integers(1, 20), seed=st.integers(0, 10**6))
def test_bilinear_oracle_and_monotone(h, w, oh, ow, seed):
    x = np.random.default_rng(seed).standard_normal((h, w, 2))
    out = ops.bilinear_resize(x, oh, ow)
    np.testing.assert_allclose(out, naive_bilinear(x, oh, ow), atol=1e-12)
    assert out.min() >= x.min() - 1e-12 and out.max() <= x.max() + 1e-12


def test_bilinear_grad_is_adjoint():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 5, 4))
    y = rng.standard_normal((2, 12, 7, 4))
    lhs = np.sum(ops.bilinear_resize(x, 12, 7) * y)
    rhs = np.sum(x * ops.bilinear_resize_grad(x.shape, y))
    assert abs(lhs - rhs) < 1e-10


# ------------------------------------------------------------ depth to space


def test_depth_to_space_definition():
    out = ops.depth_to_space(np.arange(4.0).reshape(1, 1, 4), 2)
    np.testing.assert_array_equal(out[..., 0], [[0, 1], [2, 3]])


def test_depth_to_space_identity_factor_one():
    x = np.random.default_rng(7).standard_normal((3, 4, 5))
    np.testing.assert_array_equal(ops.depth_to_space(x, 1), x)


@settings(max_examples=30, deadline=None)
@given(f=st.integers(1, 4), h=st.integers(1, 4), w=st.integers(1, 4), c=st.integers(1, 3), seed=st.integers(0, 999))
def test_depth_to_space_inverse_and_permutation(f, h, w, c, seed):
    x = np.random.default_rng(seed).standard_normal((h, w, f * f * c))
    y = ops.depth_to_space(x, f)
    assert y.shape == (h * f, w * f, c)
    np.testing.assert_array_equal(ops.space_to_depth(y, f), x)
    np.testing.assert_array_equal(np.sort(y.ravel()), np.sort(x.ravel()))
    # channel block a*f+b of cell (i, j) lands at (i*f+a, j*f+b)
    i, j, a, b = h - 1, 0, f - 1, 0
    np.testing.assert_array_equal(y[i * f + a, j * f + b], x[i, j, (a * f + b) * c : (a * f + b + 1) * c])


def test_depth_to_space_divisibility():
    with pytest.raises(ContractError):
        ops.depth_to_space(np.zeros((2, 2, 6)), 2)


# ------------------------------------------------------------- cross entropy


def test_cross_entropy_uniform():
    loss, grad, empty = ops.softmax_cross_entropy(np.zeros((1, 1, 2)), np.array([[0]]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_allclose(grad[0, 0], [-0.5, 0.5])
    assert not empty


def test_cross_entropy_stable():
    loss, grad, _ = ops.softmax_cross_entropy(np.array([[[1000.0, 0.0]]]), np.array([[0]]))
    assert 0 <= loss < 1e-12 and np.all(np.isfinite(grad))
    loss, _, _ = ops.softmax_cross_entropy(np.array([[[1000.0, 0.0]]]), np.array([[1]]))
    assert loss == pytest.approx(1000.0)


def test_cross_entropy_all_ignored():
    loss, grad, empty = ops.softmax_cross_entropy(np.ones((2, 2, 3)), np.full((2, 2), 255))
    assert loss == 0.0 and not grad.any() and empty


def test_cross_entropy_ignored_pixels_have_zero_grad():
    rng = np.random.default_rng(8)
    labels = rng.integers(0, 3, (4, 4))
    labels[1, 2] = 255
    loss, grad, _ = ops.softmax_cross_entropy(rng.standard_normal((4, 4, 3)), labels)
    assert not grad[1, 2].any()
    np.testing.assert_allclose(grad.sum(axis=-1), 0, atol=1e-15)
    # mean over the 15 valid pixels
    assert np.abs(grad).sum() > 0 and loss > 0


def test_cross_entropy_batch_is_mean_of_images():
    rng = np.random.default_rng(9)
    logits = rng.standard_normal((3, 4, 4, 5))
    labels = rng.integers(0, 5, (3, 4, 4))
    labels[0, :2] = 255
    loss, grad, _ = ops.softmax_cross_entropy(logits, labels)
    singles = [ops.softmax_cross_entropy(logits[i], labels[i]) for i in range(3)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]), rel=1e-12)
    np.testing.assert_allclose(grad, np.stack([s[1] for s in singles]) / 3, atol=1e-15)


# ------------------------------------------------------------ gradient suite


@pytest.mark.parametrize(
    "op", ["conv2d_1x1", "conv2d_3x3", "conv2d_3x3_s2", "relu", "bilinear_resize", "depth_to_space", "softmax_cross_entropy"]
)
def test_finite_differences(op):
    report = gradcheck.check_op(op, trials=20)
    assert report.probes >= 20
    assert report.max_rel_error < 1e-4, report


def test_precision_switch():
    assert ops.default_dtype() == np.float32
    with ops.precision("real64"):
        assert ops.default_dtype() == np.float64
    assert ops.default_dtype() == np.float32

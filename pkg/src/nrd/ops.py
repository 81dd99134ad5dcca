"""Differentiable primitives on channels-last arrays.

Every op accepts a single ``H x W x C`` map or a batch ``N x H x W x C``.
Forward functions are pure; each ``*_grad`` takes the forward arguments plus
the upstream gradient and returns gradients shaped like the arguments.
"""

import contextlib
from dataclasses import dataclass

import numpy as np

from .tensors import IGNORE

_PRECISION = {"dtype": np.float32}


def default_dtype():
    return _PRECISION["dtype"]


def set_precision(name):
    """Select ``"real32"`` (training) or ``"real64"`` (gradient checks)."""
    _PRECISION["dtype"] = {"real32": np.float32, "real64": np.float64}[name]


@contextlib.contextmanager
def precision(name):
    old = _PRECISION["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _PRECISION["dtype"] = old


class ContractError(ValueError):
    """Argument shapes violate an op's contract."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ContractError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ContractError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def padding(self):
        return (self.kernel - 1) // 2

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    def out_extent(self, n):
        return (n + 2 * self.padding - self.kernel) // self.stride + 1


@dataclass
class GradResult:
    d_input: np.ndarray
    d_weights: np.ndarray = None
    d_bias: np.ndarray = None


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ContractError(f"expected HxWxC or NxHxWxC, got shape {x.shape}")


def _unbatch(y, squeeze):
    return y[0] if squeeze else y


# ---------------------------------------------------------------------- conv


def spec_from_weights(weights, stride=1):
    cout, cin, k, k2 = weights.shape
    if k != k2:
        raise ContractError("non-square kernel")
    return ConvSpec(cin, cout, k, stride)


def _check_conv(x, spec, weights, bias):
    if tuple(weights.shape) != spec.weight_shape:
        raise ContractError(f"weights shape {weights.shape} != {spec.weight_shape}")
    if tuple(bias.shape) != (spec.out_channels,):
        raise ContractError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    if x.shape[-1] != spec.in_channels:
        raise ContractError(f"input has {x.shape[-1]} channels, conv expects {spec.in_channels}")


def _im2col(x, spec):
    """N x Ho x Wo x (k*k*Cin) patch matrix, tap-major then channel."""
    n, h, w, c = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    ho, wo = spec.out_extent(h), spec.out_extent(w)
    if k == 1 and s == 1:
        return x, ho, wo
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, :, a, b, :] = xp[:, a : a + s * (ho - 1) + 1 : s, b : b + s * (wo - 1) + 1 : s, :]
    return cols.reshape(n, ho, wo, k * k * c), ho, wo


def _wmat(weights):
    # (Cout, Cin, k, k) -> (k*k*Cin, Cout), matching the im2col column order
    cout = weights.shape[0]
    return weights.transpose(2, 3, 1, 0).reshape(-1, cout)


def conv2d_fwd(x, weights, bias, stride=1):
    """Batched conv returning ``(out, cols)``; ``cols`` feeds :func:`conv2d_bwd`."""
    spec = spec_from_weights(weights, stride)
    cols, ho, wo = _im2col(x, spec)
    out = cols.reshape(-1, cols.shape[-1]) @ _wmat(weights).astype(x.dtype, copy=False)
    out += bias.astype(x.dtype, copy=False)
    return out.reshape(x.shape[0], ho, wo, spec.out_channels), cols


def conv2d_bwd(x_shape, cols, weights, stride, dout, need_input=True):
    spec = spec_from_weights(weights, stride)
    n, h, w, c = x_shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    g = dout.reshape(-1, spec.out_channels)
    cm = cols.reshape(-1, cols.shape[-1])
    dw = (cm.T @ g).reshape(k, k, c, spec.out_channels).transpose(3, 2, 0, 1)
    db = g.sum(axis=0)
    if not need_input:
        return None, dw, db
    dcols = g @ _wmat(weights).astype(dout.dtype, copy=False).T
    ho, wo = dout.shape[1], dout.shape[2]
    if k == 1 and s == 1:
        return dcols.reshape(x_shape), dw, db
    dcols = dcols.reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dout.dtype)
    for a in range(k):
        for b in range(k):
            dxp[:, a : a + s * (ho - 1) + 1 : s, b : b + s * (wo - 1) + 1 : s, :] += dcols[:, :, :, a, b, :]
    dx = dxp[:, p : p + h, p : p + w, :] if p else dxp
    return dx, dw, db


def conv2d(x, spec, weights, bias):
    """Zero-padded cross-correlation; output extent ``(H + 2p - k) // stride + 1``."""
    xb, squeeze = _as_batch(x)
    _check_conv(xb, spec, weights, bias)
    out, _ = conv2d_fwd(xb, weights, bias, spec.stride)
    return _unbatch(out, squeeze)


def conv2d_grad(x, spec, weights, bias, dout):
    xb, squeeze = _as_batch(x)
    _check_conv(xb, spec, weights, bias)
    db_, _ = _as_batch(dout)
    expected = (xb.shape[0], spec.out_extent(xb.shape[1]), spec.out_extent(xb.shape[2]), spec.out_channels)
    if db_.shape != expected:
        raise ContractError(f"upstream gradient shape {db_.shape} != {expected}")
    cols, _, _ = _im2col(xb, spec)
    dx, dw, db = conv2d_bwd(xb.shape, cols, weights, spec.stride, db_)
    return GradResult(_unbatch(dx, squeeze), dw, db)


# ---------------------------------------------------------------------- relu


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x, dout):
    return np.where(x > 0, dout, 0).astype(np.result_type(dout), copy=False)


# ------------------------------------------------------------ bilinear resize


def _axis_taps(n_in, n_out):
    """Half-pixel source taps for one axis: indices ``i0``, ``i1`` and weight ``t``."""
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def interp_matrix(n_in, n_out):
    """Dense ``n_out x n_in`` matrix of the 1-D interpolation."""
    i0, i1, t = _axis_taps(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def _lerp_axis(x, axis, n_out):
    n_in = x.shape[axis]
    i0, i1, t = _axis_taps(n_in, n_out)
    shape = [1] * x.ndim
    shape[axis] = n_out
    t = t.reshape(shape).astype(x.dtype)
    a = np.take(x, i0, axis=axis)
    b = np.take(x, i1, axis=axis)
    return a + t * (b - a)


def bilinear_resize(x, out_h, out_w):
    """Separable linear interpolation with half-pixel centres and edge clamping."""
    if out_h < 1 or out_w < 1:
        raise ContractError("output extents must be >= 1")
    xb, squeeze = _as_batch(x)
    _, h, w, _ = xb.shape
    y = xb
    if out_h != h:
        y = _lerp_axis(y, 1, out_h)
    if out_w != w:
        y = _lerp_axis(y, 2, out_w)
    if y is xb:
        y = xb.copy()
    return _unbatch(y, squeeze)


def bilinear_resize_grad(in_shape, dout):
    """Adjoint of :func:`bilinear_resize` for an input of shape ``in_shape``."""
    db, squeeze = _as_batch(dout)
    h, w = in_shape[-3], in_shape[-2]
    _, oh, ow, _ = db.shape
    g = db
    if oh != h:
        g = np.einsum("oi,nojc->nijc", interp_matrix(h, oh).astype(db.dtype), g)
    if ow != w:
        g = np.einsum("oj,nioc->nijc", interp_matrix(w, ow).astype(db.dtype), g)
    if g is db:
        g = db.copy()
    return _unbatch(g, squeeze)


# ------------------------------------------------------------ depth to space


def depth_to_space(x, f):
    """Channel block ``a*f + b`` of cell ``(i, j)`` lands at ``(i*f + a, j*f + b)``."""
    xb, squeeze = _as_batch(x)
    n, h, w, c = xb.shape
    if c % (f * f):
        raise ContractError(f"channels {c} not divisible by f^2={f * f}")
    co = c // (f * f)
    y = xb.reshape(n, h, w, f, f, co).transpose(0, 1, 3, 2, 4, 5).reshape(n, h * f, w * f, co)
    return _unbatch(y, squeeze)


def space_to_depth(x, f):
    xb, squeeze = _as_batch(x)
    n, h, w, c = xb.shape
    if h % f or w % f:
        raise ContractError(f"extent {h}x{w} not divisible by {f}")
    y = xb.reshape(n, h // f, f, w // f, f, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // f, w // f, f * f * c)
    return _unbatch(y, squeeze)


def depth_to_space_grad(dout, f):
    # the op is a permutation, so its adjoint is the inverse permutation
    return space_to_depth(dout, f)


# ------------------------------------------------------------- cross entropy


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels, ignore=IGNORE):
    """Mean pixel cross-entropy over non-ignored pixels.

    Returns ``(loss, dlogits, empty)``. For a batch the per-image means are
    averaged; ``empty`` is True when every pixel of every image is ignored.
    Images with no valid pixel contribute loss 0 and zero gradient.
    """
    lb, squeeze = _as_batch(logits)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.shape != lb.shape[:3]:
        raise ContractError(f"labels {labels.shape} do not match logits {lb.shape[:3]}")
    n, _, _, c = lb.shape
    valid = labels != ignore
    safe = np.where(valid, labels, 0).astype(np.intp)
    if np.any(safe >= c) or np.any(safe < 0):
        raise ContractError("label id outside [0, C)")
    logp = log_softmax(lb)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    counts = valid.reshape(n, -1).sum(axis=1)
    per_image = -(picked * valid).reshape(n, -1).sum(axis=1)
    denom = np.maximum(counts, 1).astype(lb.dtype)
    loss = float(np.sum(per_image / denom) / n)

    grad = np.exp(logp)
    np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], axis=-1) - 1, axis=-1)
    scale = (valid / denom[:, None, None]).astype(lb.dtype) / n
    grad *= scale[..., None]
    return loss, _unbatch(grad, squeeze), bool(counts.sum() == 0)

"""Rank-4 tensor kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of shape (N, C, H, W).  Storage is
float32; float64 inputs are passed through in float64 so gradient checks can
run at full precision.  Convolution reductions always accumulate in float64.

Every function here is pure: inputs are never written to.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

AXES = ("N", "C", "H", "W")


def _out_dtype(*arrays):
    dt = np.result_type(*arrays)
    return np.float64 if dt == np.float64 else np.float32


def as_tensor(x, dtype=None):
    """Return ``x`` as a rank-4 float array (float32 unless float64 given)."""
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise DimensionError(f"expected a rank-4 (N, C, H, W) tensor, got rank {arr.ndim}")
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else np.float32
    return arr.astype(dtype, copy=False)


def zeros(shape, dtype=np.float32):
    if len(shape) != 4:
        raise DimensionError(f"expected 4 dimensions, got {len(shape)}")
    return np.zeros(shape, dtype=dtype)


def _check_axis(name, axis, expected, got):
    if expected != got:
        raise DimensionError(name, axis=axis, expected=expected, got=got)


@dataclass(frozen=True)
class ConvParams:
    """Weights (F, C_in, k, k), bias (F,), stride and zero padding."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = None

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise DimensionError(f"conv weight must be (F, C, k, k), got {w.shape}")
        if w.shape[2] not in (1, 3):
            raise DimensionError(f"kernel size must be 1 or 3, got {w.shape[2]}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        b = np.asarray(self.bias)
        if b.shape != (w.shape[0],):
            raise DimensionError("conv bias length", axis="F", expected=w.shape[0], got=b.shape)
        if self.padding is None:
            object.__setattr__(self, "padding", (w.shape[2] - 1) // 2)

    @property
    def kernel(self):
        return self.weight.shape[2]

    @property
    def filters(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv_input(x, params):
    x = as_tensor(x)
    _check_axis("conv input channels do not match weights", "C", params.in_channels, x.shape[1])
    return x


def _im2col(x, k, stride, pad):
    """(N, C, H, W) -> float64 columns (N, C*k*k, Ho*Wo)."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k, k, ho, wo), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def _col2im(cols, shape, k, stride, pad, ho, wo):
    n, c, h, w = shape
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out[:, :, pad:pad + h, pad:pad + w]


def conv2d(x, params):
    """Same-padded 2-D convolution (cross-correlation) with bias."""
    x = _check_conv_input(x, params)
    dtype = _out_dtype(x, params.weight)
    k, s, p = params.kernel, params.stride, params.padding
    cols, ho, wo = _im2col(x, k, s, p)
    w2 = params.weight.reshape(params.filters, -1).astype(np.float64)
    out = np.matmul(w2, cols)
    out += np.asarray(params.bias, dtype=np.float64)[None, :, None]
    return out.reshape(x.shape[0], params.filters, ho, wo).astype(dtype)


def conv2d_reference(x, params):
    """Direct loop convolution; slow, used to validate :func:`conv2d`."""
    x = _check_conv_input(x, params)
    n, c, h, w = x.shape
    k, s, p = params.kernel, params.stride, params.padding
    ho, wo = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)
    weight = np.asarray(params.weight, dtype=np.float64)
    bias = np.asarray(params.bias, dtype=np.float64)
    out = np.zeros((n, params.filters, ho, wo), dtype=np.float64)
    for b in range(n):
        for f in range(params.filters):
            for oy in range(ho):
                for ox in range(wo):
                    acc = bias[f]
                    for ch in range(c):
                        for i in range(k):
                            iy = oy * s + i - p
                            if iy < 0 or iy >= h:
                                continue
                            for j in range(k):
                                ix = ox * s + j - p
                                if 0 <= ix < w:
                                    acc += weight[f, ch, i, j] * float(x[b, ch, iy, ix])
                    out[b, f, oy, ox] = acc
    return out.astype(_out_dtype(x, params.weight))


def conv2d_backward(x, params, grad_out):
    """Vector-Jacobian product of :func:`conv2d`.

    Returns ``(grad_input, grad_weight, grad_bias)``.
    """
    x = _check_conv_input(x, params)
    k, s, p = params.kernel, params.stride, params.padding
    cols, ho, wo = _im2col(x, k, s, p)
    g = np.asarray(grad_out)
    expected = (x.shape[0], params.filters, ho, wo)
    if g.ndim != 4:
        raise DimensionError(f"grad_out must be rank 4, got rank {g.ndim}")
    for axis, e, got in zip(AXES, expected, g.shape):
        _check_axis("grad_out does not match conv output", axis, e, got)
    dtype = _out_dtype(x, params.weight, g)
    g2 = g.reshape(x.shape[0], params.filters, ho * wo).astype(np.float64)
    w2 = params.weight.reshape(params.filters, -1).astype(np.float64)

    grad_b = g2.sum(axis=(0, 2))
    grad_w = np.einsum("nfl,nkl->fk", g2, cols, optimize=True).reshape(params.weight.shape)
    grad_cols = np.matmul(w2.T, g2)
    grad_x = _col2im(grad_cols, x.shape, k, s, p, ho, wo)
    return grad_x.astype(dtype), grad_w.astype(dtype), grad_b.astype(dtype)


def leaky_relu(x, alpha=0.1):
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    x = np.asarray(x)
    return np.where(x > 0, x, alpha * x).astype(_out_dtype(x))


def leaky_relu_backward(x, grad_out, alpha=0.1):
    # x == 0 takes the negative-side slope
    x = np.asarray(x)
    g = np.asarray(grad_out)
    return np.where(x > 0, g, alpha * g).astype(_out_dtype(x, g))


def sigmoid(x):
    """Logistic function, overflow-free for any finite input."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def sigmoid_backward(x, grad_out):
    s = sigmoid(x)
    return np.asarray(grad_out) * s * (1.0 - s)


def _windows(x):
    """(N, C, H, W) -> (N, C, H/2, W/2, 4), padding odd sizes with -inf."""
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    ho, wo = x.shape[2] // 2, x.shape[3] // 2
    win = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, ho, wo, 4)


def maxpool2d(x):
    """2x2 max pooling with stride 2."""
    x = as_tensor(x)
    return _windows(x).max(axis=-1)


def maxpool2d_backward(x, grad_out):
    """Routes each window's gradient to its first (row-major) maximum."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    win = _windows(x)
    idx = win.argmax(axis=-1)
    g = np.asarray(grad_out)
    if g.shape != idx.shape:
        raise DimensionError(f"grad_out shape {g.shape} does not match pooled shape {idx.shape}")
    gw = np.zeros(win.shape, dtype=_out_dtype(x, g))
    np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
    ho, wo = idx.shape[2], idx.shape[3]
    gx = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    return gx[:, :, :h, :w]


def global_maxpool(x):
    """Per-channel maximum over all spatial sites -> (N, C, 1, 1)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h * w < 1:
        raise DimensionError("global_maxpool needs at least one spatial site")
    return x.reshape(n, c, h * w).max(axis=-1).reshape(n, c, 1, 1)


def global_maxpool_backward(x, grad_out):
    x = as_tensor(x)
    n, c, h, w = x.shape
    g = np.asarray(grad_out).reshape(n, c)
    idx = x.reshape(n, c, h * w).argmax(axis=-1)
    gx = np.zeros((n, c, h * w), dtype=_out_dtype(x, g))
    np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
    return gx.reshape(n, c, h, w)


def _check_broadcast(feature, context):
    feature = as_tensor(feature)
    context = as_tensor(context)
    for axis in (0, 1):
        _check_axis("context does not match feature", AXES[axis],
                    feature.shape[axis], context.shape[axis])
    if context.shape[2:] != (1, 1):
        raise DimensionError("context must be spatially 1x1", axis="H,W",
                             expected=(1, 1), got=context.shape[2:])
    return feature, context


def broadcast_add_channelwise(feature, context):
    feature, context = _check_broadcast(feature, context)
    return (feature + context).astype(_out_dtype(feature, context))


def broadcast_add_channelwise_backward(feature, context, grad_out):
    """Returns ``(grad_feature, grad_context)``."""
    feature, context = _check_broadcast(feature, context)
    g = np.asarray(grad_out)
    if g.shape != feature.shape:
        raise DimensionError(f"grad_out shape {g.shape} does not match feature {feature.shape}")
    dtype = _out_dtype(feature, context, g)
    grad_ctx = g.astype(np.float64).sum(axis=(2, 3), keepdims=True)
    return g.astype(dtype, copy=True), grad_ctx.astype(dtype)

"""Differentiable operations used by the depth network and its losses.

Image tensors are NCHW. Elementwise binary ops accept two same-shape tensors
or a tensor and a Python scalar; there is no general broadcasting.
"""

from __future__ import annotations

import functools
from numbers import Real

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autodiff import Function, Tensor, as_tensor


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


def _pair(a, b):
    """Coerce a binary-op operand pair; returns (tensor_a, tensor_b_or_scalar)."""
    if isinstance(a, Real) and isinstance(b, Tensor):
        return Tensor(np.full(b.shape, a, dtype=b.dtype)), b
    a = as_tensor(a)
    if isinstance(b, Real):
        return a, float(b)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------- elementwise
class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        return g, g


class AddScalar(Function):
    def forward(self, a, c):
        return a + a.dtype.type(c)

    def backward(self, g):
        return (g,)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g):
        return g, -g


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class MulScalar(Function):
    def forward(self, a, c):
        self.c = a.dtype.type(c)
        return a * self.c

    def backward(self, g):
        return (g * self.c,)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        gb = g / self.b
        return gb, -gb * self.a / self.b


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, g):
        return (g * self.sign,)


def add(a, b) -> Tensor:
    if isinstance(a, Real):
        a, b = b, a
    a, b = _pair(a, b)
    if isinstance(b, float):
        return AddScalar.apply(a, c=b)
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    if isinstance(b, Real):
        return add(a, -float(b))
    if isinstance(a, Real):
        return add(mul(b, -1.0), a)
    a, b = _pair(a, b)
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    if isinstance(a, Real):
        a, b = b, a
    a, b = _pair(a, b)
    if isinstance(b, float):
        return MulScalar.apply(a, c=b)
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    if isinstance(b, Real):
        return mul(a, 1.0 / float(b))
    a, b = _pair(a, b)
    return Div.apply(a, b)


def absolute(a: Tensor) -> Tensor:
    return Abs.apply(a)


# ----------------------------------------------------------------- reductions
class Sum(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.sum(a, dtype=a.dtype).reshape(())

    def backward(self, g):
        return (np.full(self.shape, g, dtype=g.dtype),)


class Mean(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.mean(a, dtype=a.dtype).reshape(())

    def backward(self, g):
        n = int(np.prod(self.shape))
        return (np.full(self.shape, g / n, dtype=g.dtype),)


class Slice(Function):
    def forward(self, a, index):
        self.shape, self.index = a.shape, index
        out = a[index]
        if 0 in out.shape:
            raise ShapeError(f"slice {index!r} of {a.shape} is empty")
        return np.ascontiguousarray(out)

    def backward(self, g):
        full = np.zeros(self.shape, dtype=g.dtype)
        full[self.index] = g
        return (full,)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


def sum_(a: Tensor) -> Tensor:
    return Sum.apply(a)


def mean(a: Tensor) -> Tensor:
    return Mean.apply(a)


def slice_(a: Tensor, index) -> Tensor:
    return Slice.apply(a, index=index)


def reshape(a: Tensor, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


# ---------------------------------------------------------------- activations
class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        # maximum, unlike where, lets NaN through to the output check
        return np.maximum(a, a.dtype.type(0))

    def backward(self, g):
        return (g * self.mask,)


class Softplus(Function):
    def forward(self, a):
        self.a = a
        return np.maximum(a, 0) + np.log1p(np.exp(-np.abs(a)))

    def backward(self, g):
        # logistic sigmoid, evaluated without overflow
        e = np.exp(-np.abs(self.a))
        sig = np.where(self.a >= 0, 1 / (1 + e), e / (1 + e))
        return (g * sig,)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def softplus(x: Tensor) -> Tensor:
    return Softplus.apply(x)


# ---------------------------------------------------------------- convolution
def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> read-only strided view (N, C, Ho, Wo, kh, kw)."""
    n, c, h, w = xp.shape
    sn, sc, sh, sw = xp.strides
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    return as_strided(xp, (n, c, ho, wo, kh, kw),
                      (sn, sc, sh * stride, sw * stride, sh, sw), writeable=False)


def _pad(x: np.ndarray, padding: int, value=0.0) -> np.ndarray:
    if padding == 0:
        return x
    n, c, h, w = x.shape
    out = np.full((n, c, h + 2 * padding, w + 2 * padding), value, dtype=x.dtype)
    out[:, :, padding:-padding, padding:-padding] = x
    return out


def _scatter_windows(cols: np.ndarray, padded_shape, kh, kw, stride, padding):
    """Adjoint of _windows: (N, C, Ho, Wo, kh, kw) -> (N, C, H, W)."""
    n, c, ho, wo = cols.shape[:4]
    dxp = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride] += cols[:, :, :, :, i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp


class Conv2d(Function):
    def forward(self, x, w, *maybe_b, stride=1, padding=0):
        n, cin, h, wd = x.shape
        cout, cin_w, kh, kw = w.shape
        if cin != cin_w:
            raise ShapeError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
        if kh > h + 2 * padding or kw > wd + 2 * padding:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
        self.stride, self.padding = stride, padding
        self.x_shape, self.w = x.shape, w
        self.has_bias = bool(maybe_b)
        if kh == 1 and kw == 1 and padding == 0:
            cols = np.ascontiguousarray(x[:, :, ::stride, ::stride])
            self.cols = cols
            ho, wo = cols.shape[2:]
            out = (w[:, :, 0, 0] @ cols.reshape(n, cin, ho * wo)).reshape(n, cout, ho, wo)
        else:
            xp = _pad(x, padding)
            self.padded_shape = xp.shape
            cols = _windows(xp, kh, kw, stride)
            self.cols = cols
            # (N, Ho, Wo, Cout)
            out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if self.has_bias:
            out = out + maybe_b[0][None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, g):
        w = self.w
        kh, kw = w.shape[2:]
        if kh == 1 and kw == 1 and self.padding == 0:
            n, cout, ho, wo = g.shape
            g2 = g.reshape(n, cout, ho * wo)
            cols = self.cols.reshape(n, -1, ho * wo)
            dw = (g2 @ cols.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
            dcols = (w[:, :, 0, 0].T @ g2).reshape(cols.shape[0], cols.shape[1], ho, wo)
            if self.stride == 1:
                dx = dcols
            else:
                dx = np.zeros(self.x_shape, dtype=g.dtype)
                dx[:, :, ::self.stride, ::self.stride] = dcols
        else:
            dw = np.tensordot(g, self.cols, axes=([0, 2, 3], [0, 2, 3]))
            # (N, Ho, Wo, Cin, kh, kw) -> (N, Cin, Ho, Wo, kh, kw)
            dcols = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            dx = _scatter_windows(dcols, self.padded_shape, kh, kw, self.stride, self.padding)
        grads = [dx, dw.astype(g.dtype, copy=False)]
        if self.has_bias:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (no kernel flip)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW weight")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if bias is None:
        return Conv2d.apply(x, weight, stride=stride, padding=padding)
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


# ---------------------------------------------------------------- batch norm
class RunningStats:
    """Per-channel running mean/variance, updated by exponential moving average."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.num_batches = 0

    @property
    def initialized(self) -> bool:
        return self.num_batches > 0

    def update(self, mean: np.ndarray, var: np.ndarray, momentum: float) -> None:
        m = self.mean.dtype.type(momentum)
        self.mean = ((1 - m) * self.mean + m * mean).astype(self.mean.dtype)
        self.var = ((1 - m) * self.var + m * var).astype(self.var.dtype)
        self.num_batches += 1


class BatchNorm(Function):
    def forward(self, x, gamma, beta, mean, var, eps=1e-5, batch_stats=True):
        self.batch_stats = batch_stats
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self.xhat, self.inv_std, self.gamma = xhat, inv_std, gamma
        return xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, g):
        dgamma = (g * self.xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gx = g * self.gamma[None, :, None, None]
        inv = self.inv_std[None, :, None, None]
        if self.batch_stats:
            m = g.shape[0] * g.shape[2] * g.shape[3]
            dx = inv / m * (m * gx
                            - gx.sum(axis=(0, 2, 3), keepdims=True)
                            - self.xhat * (gx * self.xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            dx = gx * inv
        return dx, dgamma, dbeta


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
               mode: str = "train", momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over N, H, W followed by an affine map.

    Train mode normalizes with (biased) batch statistics and folds them into
    ``running``; eval mode reads ``running`` and mutates nothing.
    """
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({x.shape[1]},)")
    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        out = BatchNorm.apply(x, gamma, beta, mean=mean, var=var, eps=eps, batch_stats=True)
        running.update(mean, var, momentum)
        return out
    if mode == "eval":
        if not running.initialized:
            raise StateError("batch_norm in eval mode before any running statistics were collected")
        return BatchNorm.apply(x, gamma, beta, mean=running.mean.astype(x.dtype),
                               var=running.var.astype(x.dtype), eps=eps, batch_stats=False)
    raise ValueError(f"unknown mode {mode!r}")


# -------------------------------------------------------------------- pooling
class AvgPool2d(Function):
    def forward(self, x, k=2, stride=2, padding=0):
        self.k, self.stride, self.padding = k, stride, padding
        xp = _pad(x, padding)
        self.padded_shape = xp.shape
        return _windows(xp, k, k, stride).mean(axis=(4, 5))

    def backward(self, g):
        k = self.k
        share = g / g.dtype.type(k * k)
        cols = np.broadcast_to(share[..., None, None], share.shape + (k, k))
        return (_scatter_windows(cols, self.padded_shape, k, k, self.stride, self.padding),)


class MaxPool2d(Function):
    def forward(self, x, k=2, stride=2, padding=0):
        self.k, self.stride, self.padding = k, stride, padding
        xp = _pad(x, padding, value=-np.inf)
        self.padded_shape = xp.shape
        win = _windows(xp, k, k, stride)
        flat = win.reshape(win.shape[:4] + (k * k,))
        # argmax returns the first maximal index, pinning the tie-break
        self.arg = flat.argmax(axis=-1)
        return np.take_along_axis(flat, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        k = self.k
        onehot = np.zeros(g.shape + (k * k,), dtype=g.dtype)
        np.put_along_axis(onehot, self.arg[..., None], g[..., None], axis=-1)
        cols = onehot.reshape(g.shape + (k, k))
        return (_scatter_windows(cols, self.padded_shape, k, k, self.stride, self.padding),)


def _check_window(x: Tensor, k: int, stride: int, padding: int) -> None:
    if x.ndim != 4:
        raise ShapeError("pooling expects NCHW input")
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError("invalid pooling geometry")
    h, w = x.shape[2:]
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"pool window {k} larger than padded input {h}x{w}")


def avg_pool2d(x: Tensor, k: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = k if stride is None else stride
    _check_window(x, k, stride, padding)
    return AvgPool2d.apply(x, k=k, stride=stride, padding=padding)


def max_pool2d(x: Tensor, k: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = k if stride is None else stride
    _check_window(x, k, stride, padding)
    return MaxPool2d.apply(x, k=k, stride=stride, padding=padding)


# ----------------------------------------------------------------- resampling
@functools.lru_cache(maxsize=64)
def _upsample_matrix(n: int, dtype) -> np.ndarray:
    m = upsample_matrix(n, dtype)
    m.setflags(write=False)
    return m


def upsample_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """(2n, n) bilinear weights, half-pixel centres, clamped at the borders."""
    dst = np.arange(2 * n)
    src = np.clip((dst + 0.5) / 2 - 0.5, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    m = np.zeros((2 * n, n), dtype=np.float64)
    m[dst, lo] += 1 - frac
    m[dst, hi] += frac
    return m.astype(dtype)


class Upsample2x(Function):
    def forward(self, x):
        self.uh = _upsample_matrix(x.shape[2], x.dtype)
        self.uw = _upsample_matrix(x.shape[3], x.dtype)
        return self.uh @ x @ self.uw.T

    def backward(self, g):
        return (self.uh.T @ g @ self.uw,)


def bilinear_upsample2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("bilinear_upsample2x expects NCHW input")
    return Upsample2x.apply(x)


def upsample2x_array(x: np.ndarray) -> np.ndarray:
    """Non-differentiable bilinear 2x for (..., H, W) arrays."""
    uh = upsample_matrix(x.shape[-2], x.dtype)
    uw = upsample_matrix(x.shape[-1], x.dtype)
    return np.einsum("ph,...hw,qw->...pq", uh, x, uw)


# -------------------------------------------------------------------- concat
class Concat(Function):
    def forward(self, a, b):
        self.split = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, g):
        return g[:, :self.split], g[:, self.split:]


def concat_channels(a: Tensor | None, b: Tensor | None) -> Tensor:
    """Channel-axis concatenation. ``None`` stands for a zero-channel tensor."""
    if a is None:
        return b
    if b is None:
        return a
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: N/H/W differ")
    return Concat.apply(a, b)


DIFFERENTIABLE_OPS = {
    "add": Add, "add_scalar": AddScalar, "sub": Sub, "mul": Mul,
    "mul_scalar": MulScalar, "div": Div, "abs": Abs, "sum": Sum, "mean": Mean,
    "slice": Slice, "reshape": Reshape, "relu": ReLU, "softplus": Softplus,
    "conv2d": Conv2d, "batch_norm": BatchNorm, "avg_pool2d": AvgPool2d,
    "max_pool2d": MaxPool2d, "bilinear_upsample2x": Upsample2x,
    "concat_channels": Concat,
}

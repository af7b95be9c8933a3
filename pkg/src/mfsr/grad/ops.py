"""Differentiable neural-network ops over :class:`~mfsr.grad.tensor.Tensor`.

All convolution-family ops use NCHW layout and square kernels.  Forward
passes are vectorized through im2col/col2im built on strided window views;
backward passes reuse the same machinery, so no op ever falls back to
per-pixel Python loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_op

BICUBIC_A = -0.75


def _windows(x, k, stride):
    """Strided [N,C,Ho,Wo,k,k] view of all kxk windows."""
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _col2im(cols, n, c, hp, wp, k, stride):
    """Adjoint of window extraction: scatter-add [N,Ho,Wo,C,k,k] into [N,C,Hp,Wp]."""
    ho, wo = cols.shape[1], cols.shape[2]
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    d = cols.transpose(0, 3, 1, 2, 4, 5)
    for u in range(k):
        for v in range(k):
            out[:, :, u : u + stride * (ho - 1) + 1 : stride, v : v + stride * (wo - 1) + 1 : stride] += d[
                :, :, :, :, u, v
            ]
    return out


def _check_same_dtype(op, *tensors):
    dtypes = {t.dtype for t in tensors if t is not None}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-d cross-correlation: x [N,Cin,H,W], w [Cout,Cin,k,k], zero padding.

    Output extent is floor((H + 2*pad - k)/stride) + 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    _check_same_dtype("conv2d", x, w, b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and w, got {x.shape} and {w.shape}")
    n, cin, h, wid = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2 or k < 1:
        raise ShapeError(f"conv2d needs a square kernel with k >= 1, got {w.shape}")
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: x has {cin} channels, w expects {cin_w}")
    if h + 2 * pad < k or wid + 2 * pad < k:
        raise ShapeError(f"conv2d kernel {k} exceeds padded input {h + 2 * pad}x{wid + 2 * pad}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, cin * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data[None, :, None, None]

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gw = None
        if w.requires_grad:
            xp2 = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            cols2 = np.ascontiguousarray(_windows(xp2, k, stride).transpose(0, 2, 3, 1, 4, 5)).reshape(
                n * ho * wo, cin * k * k
            )
            gw = (gmat.T @ cols2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, cin, k, k)
            gxp = _col2im(dcols, n, cin, h + 2 * pad, wid + 2 * pad, k, stride)
            gx = gxp[:, :, pad : pad + h, pad : pad + wid] if pad else gxp
            gx = np.ascontiguousarray(gx)
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, vjp, "conv2d")


def conv_transpose2d(x, w, b=None, stride=1):
    """Transposed convolution: x [N,Cin,H,W], w [Cin,Cout,k,k].

    Output extent is (H - 1)*stride + k; the op is the exact adjoint of
    ``conv2d`` with the same kernel array, zero padding and equal stride.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    _check_same_dtype("conv_transpose2d", x, w, b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d x and w, got {x.shape} and {w.shape}")
    n, cin, h, wid = x.shape
    cin_w, cout, k, k2 = w.shape
    if k != k2 or k < 1 or stride < 1:
        raise ShapeError(f"conv_transpose2d needs square k >= 1 and stride >= 1, got {w.shape}, {stride}")
    if cin != cin_w:
        raise ShapeError(f"conv_transpose2d channel mismatch: x has {cin}, w expects {cin_w}")
    ho, wo = (h - 1) * stride + k, (wid - 1) * stride + k

    xmat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * wid, cin)
    wmat = w.data.reshape(cin, cout * k * k)
    cols = (xmat @ wmat).reshape(n, h, wid, cout, k, k)
    out = _col2im(cols, n, cout, ho, wo, k, stride)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv_transpose2d bias shape {b.shape} != ({cout},)")
        out = out + b.data[None, :, None, None]

    def vjp(g):
        gwin = np.ascontiguousarray(_windows(g, k, stride).transpose(0, 2, 3, 1, 4, 5)).reshape(
            n * h * wid, cout * k * k
        )
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gwin @ wmat.T).reshape(n, h, wid, cin).transpose(0, 3, 1, 2))
        gw = (xmat.T @ gwin).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, vjp, "conv_transpose2d")


def prelu(x, slope):
    """Parametric ReLU with one shared learnable slope (shape (1,))."""
    x, slope = as_tensor(x), as_tensor(slope)
    _check_same_dtype("prelu", x, slope)
    if slope.size != 1:
        raise ShapeError(f"prelu slope must be a single shared scalar, got shape {slope.shape}")
    pos = x.data > 0
    out = np.where(pos, x.data, slope.data.reshape(()) * x.data)

    def vjp(g):
        gx = g * np.where(pos, x.dtype.type(1), slope.data.reshape(())) if x.requires_grad else None
        gs = None
        if slope.requires_grad:
            gs = np.asarray((g * np.where(pos, 0, x.data)).sum(), dtype=x.dtype).reshape(slope.shape)
        return gx, gs

    return make_op(out, (x, slope), vjp, "prelu")


def relu(x):
    """prelu with fixed slope 0 and no parameter."""
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, x.dtype.type(0))

    def vjp(g):
        return (g * pos,)

    return make_op(out, (x,), vjp, "relu")


def maxpool2d(x, k=2, s=2):
    """Window maxima; trailing rows/cols that do not fill a window are dropped.

    Gradient routes to the first maximal element of each window in scan order.
    """
    x = as_tensor(x)
    n, c, h, wid = x.shape
    if h < k or wid < k:
        raise ShapeError(f"maxpool2d window {k} exceeds input {h}x{wid}")
    win = _windows(x.data, k, s)
    ho, wo = win.shape[2], win.shape[3]
    flat = np.ascontiguousarray(win).reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros((n, c, h, wid), dtype=x.dtype)
        for t in range(k * k):
            u, v = divmod(t, k)
            gx[:, :, u : u + s * (ho - 1) + 1 : s, v : v + s * (wo - 1) + 1 : s] += g * (idx == t)
        return (gx,)

    return make_op(np.ascontiguousarray(out), (x,), vjp, "maxpool2d")


@dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer (not learned)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def for_channels(cls, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        return cls(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def batchnorm2d(x, gamma, beta, state, training):
    """Per-channel batch normalization with affine parameters.

    Training mode normalizes by batch statistics and updates the running
    ones; eval mode normalizes by the running statistics.  Training needs
    a batch of at least 2 examples.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_same_dtype("batchnorm2d", x, gamma, beta)
    n, c, h, wid = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d affine params must have shape ({c},)")
    eps = x.dtype.type(state.eps)

    if training:
        if n < 2:
            raise ShapeError("batchnorm2d training mode needs a batch of at least 2")
        count = n * h * wid
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(x.dtype)
        unbiased = var * count / (count - 1)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(x.dtype)
    else:
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def vjp(g):
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                cnt = x.dtype.type(n * h * wid)
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv[None, :, None, None] / cnt) * (cnt * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv[None, :, None, None]
            gx = gx.astype(x.dtype, copy=False)
        return gx, ggamma, gbeta

    return make_op(out, (x, gamma, beta), vjp, "batchnorm2d")


def linear(x, w, b=None):
    """x [N,Din] -> x @ w.T + b with w [Dout,Din]; bias optional."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    _check_same_dtype("linear", x, w, b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear dimension mismatch: x {x.shape} vs w {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data[None, :]

    def vjp(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, vjp, "linear")


def dropout(x, p, training, rng=None):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity in eval mode or at p == 0.  Deterministic under a fixed
    ``numpy.random.Generator``.
    """
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = x.dtype.type(1.0 / (1.0 - p))
    out = x.data * keep * scale

    def vjp(g):
        return (g * keep * scale,)

    return make_op(out, (x,), vjp, "dropout")


def clip(x, lo, hi):
    """Clamp values; gradient passes where lo <= x <= hi."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def vjp(g):
        return (g * inside,)

    return make_op(out, (x,), vjp, "clip")


def separable_transform(x, row_mat, col_mat):
    """Apply fixed matrices along the two trailing spatial axes.

    out[..., i, j] = sum_{h,w} row_mat[i,h] * x[..., h, w] * col_mat[j,w].
    Matrices may be [O,I] (shared) or [N,O,I] (one per batch element); they
    are constants of the graph.  Bicubic upsampling, area pooling and the
    Lanczos shift are all instances of this op.
    """
    x = as_tensor(x)
    row = np.asarray(row_mat, dtype=x.dtype)
    col = np.asarray(col_mat, dtype=x.dtype)
    if x.ndim != 4:
        raise ShapeError(f"separable_transform expects [N,C,H,W], got {x.shape}")
    rmat = row[:, None] if row.ndim == 3 else row
    cmat = col[:, None] if col.ndim == 3 else col
    out = np.matmul(rmat, np.matmul(x.data, np.swapaxes(cmat, -1, -2)))

    def vjp(g):
        gx = np.matmul(np.swapaxes(rmat, -1, -2), np.matmul(g, cmat))
        return (np.ascontiguousarray(gx.astype(x.dtype, copy=False)),)

    return make_op(np.ascontiguousarray(out), (x,), vjp, "separable_transform")


def _cubic_weights(t, a=BICUBIC_A):
    """Kernel weights at taps floor(u)-1 .. floor(u)+2 for fractional t."""
    s = np.array([t + 1.0, t, 1.0 - t, 2.0 - t])
    w = np.empty(4)
    for i, d in enumerate(s):
        d = abs(d)
        if d <= 1.0:
            w[i] = (a + 2) * d**3 - (a + 3) * d**2 + 1
        elif d < 2.0:
            w[i] = a * (d**3 - 5 * d**2 + 8 * d - 4)
        else:
            w[i] = 0.0
    return w


def bicubic_matrix(n_in, n_out, a=BICUBIC_A):
    """Row-stochastic [n_out, n_in] bicubic resampling matrix.

    Half-pixel-centre source coordinates (align_corners=False) with
    replicated borders; constants map to constants exactly.  Note the
    default kernel parameter a=-0.75 is only first-order accurate: a
    linear ramp picks up a bounded interior deviation of (4a+2)/27 at
    thirds, vanishing for a=-0.5.
    """
    m = np.zeros((n_out, n_in))
    scale = n_out / n_in
    for i in range(n_out):
        u = (i + 0.5) / scale - 0.5
        j0 = int(np.floor(u))
        w = _cubic_weights(u - j0, a)
        for tap, wt in zip(range(j0 - 1, j0 + 3), w):
            m[i, min(max(tap, 0), n_in - 1)] += wt
    return m


def upsample_bicubic(x, scale):
    """Bicubic resampling of NCHW spatial extents by ``scale`` (floored)."""
    x = as_tensor(x)
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    n, c, h, wid = x.shape
    ho, wo = int(h * scale), int(wid * scale)
    return separable_transform(x, bicubic_matrix(h, ho), bicubic_matrix(wid, wo))


def _adaptive_bins(n_in, n_out):
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -(-((i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x, out_h, out_w):
    """Area-average resize to a fixed spatial size (identity when equal)."""
    x = as_tensor(x)
    n, c, h, wid = x.shape
    if (h, wid) == (out_h, out_w):
        return x
    return separable_transform(x, _adaptive_bins(h, out_h), _adaptive_bins(wid, out_w))

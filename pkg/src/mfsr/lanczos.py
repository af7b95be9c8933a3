"""Sub-pixel image translation with separable windowed-sinc kernels.

A shift ``delta`` splits into an integer anchor and a fractional part
``f`` in [-0.5, 0.5); the anchor becomes an index offset and the fraction
a short interpolation kernel, so the taps stay well-conditioned for any
magnitude of shift.  Boundaries reflect about the edge pixel (the edge
sample itself is not repeated).

The registered training loss lives here too: it re-aligns a reconstruction
to its ground truth using a learned shift before comparing them, plus an
L2 penalty on the shift magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grad import Tensor, as_tensor, clip, make_op
from .metrics import clear_mse_loss, mse_loss

DEFAULT_SUPPORT = 3
DEFAULT_MAX_SHIFT = 10.0


@dataclass(frozen=True)
class Shift:
    """A 2-d translation in pixels: +dx moves content right, +dy down."""

    dx: float
    dy: float


@dataclass(frozen=True)
class LanczosKernel:
    """Normalized taps of length 2a+1 plus the integer anchor offset."""

    taps: np.ndarray
    anchor: int
    a: int


def _sinc_deriv(t):
    """Derivative of sin(pi t)/(pi t); zero at t == 0."""
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    nz = t != 0
    out[nz] = (np.cos(np.pi * t[nz]) - np.sinc(t[nz])) / t[nz]
    return out


def _split(delta):
    if not np.isfinite(delta):
        raise ValueError(f"shift must be finite, got {delta}")
    anchor = int(np.floor(delta + 0.5))
    return anchor, float(delta) - anchor


def _kernel_taps(delta, a, with_deriv=False):
    """Unit-sum taps over offsets -a..a, optionally with d(taps)/d(delta)."""
    anchor, f = _split(delta)
    n = np.arange(-a, a + 1, dtype=np.float64)
    t = n - f
    inside = np.abs(t) < a
    if f == 0.0:
        taps = np.zeros(2 * a + 1)
        taps[a] = 1.0
    else:
        taps = np.where(inside, np.sinc(t) * np.sinc(t / a), 0.0)
        taps = taps / taps.sum()
    if not with_deriv:
        return anchor, taps, None
    u = np.where(inside, np.sinc(t) * np.sinc(t / a), 0.0)
    du = np.where(inside, -(_sinc_deriv(t) * np.sinc(t / a) + np.sinc(t) * _sinc_deriv(t / a) / a), 0.0)
    s, ds = u.sum(), du.sum()
    dtaps = (du * s - u * ds) / (s * s)
    return anchor, taps, dtaps


def lanczos_kernel(delta, a=DEFAULT_SUPPORT):
    """Interpolation kernel realizing a 1-d shift by ``delta`` pixels.

    taps[k] weights the source sample at offset (k - a) + anchor behind
    the output position; taps sum to 1, and integer shifts yield an exact
    one-hot kernel.
    """
    if a < 1:
        raise ValueError(f"kernel support must be >= 1, got {a}")
    anchor, taps, _ = _kernel_taps(delta, a)
    return LanczosKernel(taps=taps, anchor=anchor, a=a)


def _fold(idx, n):
    """Reflect an index into [0, n-1] without repeating the edge sample."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    r = np.abs(idx) % period
    return np.where(r >= n, period - r, r)


def shift_matrix(size, delta, a=DEFAULT_SUPPORT, with_deriv=False):
    """[size, size] matrix applying a 1-d shift by ``delta`` along an axis."""
    anchor, taps, dtaps = _kernel_taps(delta, a, with_deriv=with_deriv)
    mat = np.zeros((size, size))
    dmat = np.zeros((size, size)) if with_deriv else None
    rows = np.arange(size)
    for k in range(2 * a + 1):
        cols = _fold(rows - anchor - (k - a), size)
        np.add.at(mat, (rows, cols), taps[k])
        if with_deriv:
            np.add.at(dmat, (rows, cols), dtaps[k])
    return (mat, dmat) if with_deriv else mat


def _as_shift(s):
    if isinstance(s, Shift):
        return s
    dx, dy = s
    return Shift(float(dx), float(dy))


def _check_magnitude(dx, dy, max_shift):
    if not (np.isfinite(dx) and np.isfinite(dy)):
        raise ValueError(f"shift components must be finite, got ({dx}, {dy})")
    if abs(dx) > max_shift or abs(dy) > max_shift:
        raise ValueError(f"shift ({dx}, {dy}) exceeds the allowed magnitude {max_shift}")


def shift_image(img, s, a=DEFAULT_SUPPORT, max_shift=DEFAULT_MAX_SHIFT):
    """Translate the trailing two axes of ``img`` by a sub-pixel shift."""
    s = _as_shift(s)
    _check_magnitude(s.dx, s.dy, max_shift)
    img = np.asarray(img)
    if img.ndim < 2:
        raise ValueError(f"expected at least 2-d image, got shape {img.shape}")
    h, w = img.shape[-2], img.shape[-1]
    row = shift_matrix(h, s.dy, a)
    col = shift_matrix(w, s.dx, a)
    out = np.matmul(row, np.matmul(img.astype(np.float64, copy=False), col.T))
    return out.astype(img.dtype, copy=False) if img.dtype in (np.float32, np.float64) else out


def shift_tensor(x, deltas, a=DEFAULT_SUPPORT, max_shift=DEFAULT_MAX_SHIFT, differentiable_kernel=False):
    """Graph op shifting each batch element by its own (dx, dy).

    ``x`` is [N,C,H,W]; ``deltas`` is an [N,2] tensor of (dx, dy) pairs.
    With ``differentiable_kernel`` the shift parameters receive the exact
    gradient through the kernel taps; otherwise the taps are treated as
    constants and only the image carries gradient.
    """
    x, deltas = as_tensor(x), as_tensor(deltas)
    if x.ndim != 4:
        raise ValueError(f"expected [N,C,H,W], got {x.shape}")
    n = x.shape[0]
    if deltas.shape != (n, 2):
        raise ValueError(f"expected deltas of shape ({n}, 2), got {deltas.shape}")
    h, w = x.shape[2], x.shape[3]
    want = differentiable_kernel and deltas.requires_grad
    rowm = np.empty((n, h, h))
    colm = np.empty((n, w, w))
    drow = np.empty((n, h, h)) if want else None
    dcol = np.empty((n, w, w)) if want else None
    for i in range(n):
        dx, dy = float(deltas.data[i, 0]), float(deltas.data[i, 1])
        _check_magnitude(dx, dy, max_shift)
        if want:
            rowm[i], drow[i] = shift_matrix(h, dy, a, with_deriv=True)
            colm[i], dcol[i] = shift_matrix(w, dx, a, with_deriv=True)
        else:
            rowm[i] = shift_matrix(h, dy, a)
            colm[i] = shift_matrix(w, dx, a)
    rowm = rowm.astype(x.dtype)
    colm = colm.astype(x.dtype)
    rb, cb = rowm[:, None], colm[:, None]
    out = np.matmul(rb, np.matmul(x.data, np.swapaxes(cb, -1, -2)))

    def vjp(g):
        gx = None
        if x.requires_grad:
            gx = np.matmul(np.swapaxes(rb, -1, -2), np.matmul(g, cb))
            gx = np.ascontiguousarray(gx.astype(x.dtype, copy=False))
        gd = None
        if want:
            drb = drow.astype(x.dtype)[:, None]
            dcb = dcol.astype(x.dtype)[:, None]
            xcbt = np.matmul(x.data, np.swapaxes(cb, -1, -2))
            gdy = np.einsum("nchw,nchw->n", g, np.matmul(drb, xcbt))
            rx = np.matmul(rb, x.data)
            gdx = np.einsum("nchw,nchw->n", g, np.matmul(rx, np.swapaxes(dcb, -1, -2)))
            gd = np.stack([gdx, gdy], axis=1).astype(deltas.dtype)
        return gx, gd

    parents = (x, deltas) if want else (x, deltas.detach())
    return make_op(np.ascontiguousarray(out), parents, vjp, "lanczos_shift")


def shift_penalty(deltas):
    """Batch mean of the per-example L2 norm of (dx, dy).

    The backward pass guards the norm away from zero so a perfectly
    centered prediction does not blow up the gradient.
    """
    deltas = as_tensor(deltas)
    if deltas.ndim != 2 or deltas.shape[1] != 2:
        raise ValueError(f"expected [N,2] shifts, got {deltas.shape}")
    norms = np.sqrt((deltas.data.astype(np.float64) ** 2).sum(axis=1))
    val = np.asarray(norms.mean(), dtype=deltas.dtype)

    def vjp(g):
        safe = np.maximum(norms, 1e-12)[:, None]
        return ((g * deltas.data / (safe * len(norms))).astype(deltas.dtype),)

    return make_op(val, (deltas,), vjp, "shift_penalty")


def registered_loss(
    sr,
    hr,
    mask,
    shiftnet,
    lam=1e-6,
    loss_kind="cmse",
    a=DEFAULT_SUPPORT,
    max_shift=DEFAULT_MAX_SHIFT,
    differentiable_kernel=False,
):
    """Loss between a reconstruction and its target after learned re-alignment.

    L = base_loss(shift(sr, delta), hr) + lam * ||delta||_2 with
    delta = shiftnet(sr, hr), an [N,2] tensor of per-example (dx, dy).
    Predictions are clamped to the representable shift range before
    resampling; the penalty acts on the raw prediction.  ``loss_kind``
    selects the bias-corrected masked MSE ("cmse") or plain MSE ("mse").
    """
    sr, hr = as_tensor(sr), as_tensor(hr)
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: sr {sr.shape} vs hr {hr.shape}")
    deltas = shiftnet(sr, hr)
    if isinstance(deltas, Shift):
        deltas = Tensor(np.array([[deltas.dx, deltas.dy]]), dtype=sr.dtype)
    deltas = as_tensor(deltas)
    penalty = shift_penalty(deltas) * float(lam)
    bounded = clip(deltas, -max_shift, max_shift)
    shifted = shift_tensor(sr, bounded, a=a, max_shift=max_shift, differentiable_kernel=differentiable_kernel)
    if loss_kind == "cmse":
        base = clear_mse_loss(shifted, hr, mask)
    elif loss_kind == "mse":
        base = mse_loss(shifted, hr)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    return base + penalty

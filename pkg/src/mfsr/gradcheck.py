"""Central finite-difference verification of every differentiable op.

Each check builds a scalar-valued function of one input array, compares
the reverse-mode gradient against central differences at f64, and
reports the worst relative error.  The end-to-end check runs a tiny
fusion + registration + loss graph and probes a few entries of every
parameter.
"""

from __future__ import annotations

import numpy as np

from .grad import Tensor, backward, concat, reshape, sqrt, tmean, tsum
from .grad.ops import (
    BatchNormState,
    adaptive_avg_pool2d,
    batchnorm2d,
    clip,
    conv2d,
    conv_transpose2d,
    dropout,
    linear,
    maxpool2d,
    prelu,
    relu,
    separable_transform,
    upsample_bicubic,
)
from .lanczos import registered_loss, shift_penalty, shift_tensor
from .metrics import clear_mse_loss
from .models import (
    HighResNetConfig,
    ShiftNetConfig,
    highresnet_forward_batch,
    init_highresnet,
    init_shiftnet,
    shiftnet_forward_batch,
)


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar-valued f at x, entry by entry."""
    x = np.array(x, dtype=np.float64)  # private copy; perturbation must not leak out
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f(x)
        flat[i] = keep - eps
        lo = f(x)
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def rel_error(analytic, numeric):
    denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / denom)


def check_op(f_tensor, x0, eps=1e-6):
    """Compare backward() of f_tensor against numeric_grad of its value.

    f_tensor must be a pure function of its tensor argument (any other
    randomness has to be frozen outside it).
    """
    x0 = np.asarray(x0, dtype=np.float64)

    def value(arr):
        t = Tensor(arr.copy(), requires_grad=True)
        return f_tensor(t).item()

    t = Tensor(x0.copy(), requires_grad=True)
    grads = backward(f_tensor(t))
    return rel_error(grads[t], numeric_grad(value, x0, eps))


def _op_checks(rng):
    """(name, thunk returning relative error) for each op, one input each."""
    x4 = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b4 = rng.standard_normal(4)
    wt = rng.standard_normal((3, 4, 3, 3)) * 0.5
    x2 = rng.standard_normal((3, 5))
    lw = rng.standard_normal((4, 5)) * 0.5
    lb = rng.standard_normal(4)
    p4 = rng.standard_normal(x4.shape)
    p2 = rng.standard_normal(x2.shape)
    p_sum = rng.standard_normal((2, 3))
    p_reshape = rng.standard_normal((6, 6, 6))
    p_concat = rng.standard_normal((3, 10))
    p_slice = rng.standard_normal((3, 2))
    p_pool = rng.standard_normal((2, 3, 3, 3))
    p_lin = rng.standard_normal((3, 4))
    p_up = rng.standard_normal((2, 3, 18, 18))
    p_ada = rng.standard_normal((2, 3, 4, 4))
    row = rng.standard_normal((9, 6)) * 0.4
    col = rng.standard_normal((8, 6)) * 0.4
    img = rng.standard_normal((2, 1, 7, 7))
    p_img = rng.standard_normal(img.shape)
    deltas = rng.uniform(-1.2, 1.2, (2, 2))
    hr = rng.uniform(0.0, 1.0, (2, 1, 6, 6))
    sr0 = hr + 0.1 * rng.standard_normal(hr.shape)
    mask = (rng.uniform(size=hr.shape) > 0.3).astype(np.float64)

    checks = []

    def add(name, fn, x0):
        checks.append((name, lambda fn=fn, x0=x0: check_op(fn, x0)))

    add("add", lambda t: tsum(t + Tensor(x4 * 0.3)), x4)
    add("mul", lambda t: tsum(t * Tensor(x4 * 0.3 + 1.0)), x4)
    add("divide", lambda t: tsum(t / Tensor(np.abs(x4) + 1.5)), x4)
    add("sqrt", lambda t: tsum(sqrt(t * t + Tensor(np.ones_like(x2)))), x2)
    add("sum_axis", lambda t: tsum(tsum(t, axis=(2, 3)) * Tensor(p_sum)), x4)
    add("mean", lambda t: tmean(t * t), x4)
    add("reshape", lambda t: tsum(reshape(t, (6, 6, 6)) * Tensor(p_reshape)), x4)
    add("concat", lambda t: tsum(concat([t, t * Tensor(np.full_like(x2, 2.0))], axis=1) * Tensor(p_concat)), x2)
    add("getitem", lambda t: tsum(t[:, 1:3] * Tensor(p_slice)), x2)
    add("conv2d", lambda t: tsum(conv2d(t, Tensor(w), Tensor(b4), stride=1, pad=1) * 0.1), x4)
    add("conv2d_w", lambda t: tsum(conv2d(Tensor(x4), t, Tensor(b4), stride=2, pad=1) * 0.1), w)
    add("conv_transpose2d", lambda t: tsum(conv_transpose2d(t, Tensor(wt), Tensor(b4), stride=3) * 0.1), x4)
    add("conv_transpose2d_w", lambda t: tsum(conv_transpose2d(Tensor(x4), t, None, stride=2) * 0.1), wt)
    add("prelu", lambda t: tsum(prelu(t, Tensor(np.array(0.25))) * Tensor(p4)), x4)
    add("prelu_slope", lambda t: tsum(prelu(Tensor(x4), t) * Tensor(p4)), np.array(0.25))
    add("relu", lambda t: tsum(relu(t + Tensor(np.full_like(x4, 0.05))) * Tensor(p4)), x4)
    add("maxpool2d", lambda t: tsum(maxpool2d(t, 2, 2) * Tensor(p_pool)), x4)
    add("linear", lambda t: tsum(linear(t, Tensor(lw), Tensor(lb)) * Tensor(p_lin)), x2)
    add("linear_w", lambda t: tsum(linear(Tensor(x2), t, None) * 0.5), lw)
    add("clip", lambda t: tsum(clip(t, -0.8, 0.8) * Tensor(p4)), x4 * 0.5)

    def bn_loss(t):
        st = BatchNormState.for_channels(3, np.float64)
        y = batchnorm2d(t, Tensor(np.full(3, 1.3)), Tensor(np.full(3, 0.2)), st, training=True)
        return tsum(y * Tensor(p4))

    add("batchnorm2d", bn_loss, x4)

    def bn_gamma_loss(t):
        st = BatchNormState.for_channels(3, np.float64)
        y = batchnorm2d(Tensor(x4), t, Tensor(np.zeros(3)), st, training=True)
        return tsum(y * Tensor(p4))

    add("batchnorm2d_gamma", bn_gamma_loss, np.full(3, 1.1))

    def drop_loss(t):
        y = dropout(t, 0.4, training=True, rng=np.random.default_rng(99))
        return tsum(y * Tensor(p2))

    add("dropout", drop_loss, x2)
    add("separable_transform", lambda t: tsum(separable_transform(t, row, col) * 0.3), x4)
    add("upsample_bicubic", lambda t: tsum(upsample_bicubic(t, 3) * Tensor(p_up)), x4)
    add("adaptive_avg_pool2d", lambda t: tsum(adaptive_avg_pool2d(t, 4, 4) * Tensor(p_ada)), x4)
    add("shift_tensor_image", lambda t: tsum(shift_tensor(t, Tensor(deltas)) * Tensor(p_img)), img)
    add("shift_tensor_delta", lambda t: tsum(shift_tensor(Tensor(img), t, differentiable_kernel=True) * Tensor(p_img)), deltas)
    add("shift_penalty", lambda t: shift_penalty(t), deltas + 0.3)
    add("clear_mse_loss", lambda t: clear_mse_loss(t, Tensor(hr), mask), sr0)
    return checks


def _end_to_end_error(seed):
    """FD-check a tiny fusion + registration + loss graph through a few
    entries of every parameter."""
    rng = np.random.default_rng(seed)
    hr_cfg = HighResNetConfig(hidden_channels=4, zoom=3)
    params = init_highresnet(hr_cfg, rng=np.random.default_rng(seed + 1), dtype=np.float64)
    sn_cfg = ShiftNetConfig(input_side=8, channels=(2, 2, 2, 2, 2, 2, 2, 2), fc1_width=8)
    net = init_shiftnet(sn_cfg, rng=np.random.default_rng(seed + 2), dtype=np.float64)
    # the zero-initialized head would mute the registration path; probe it off zero
    net.params["fc2.w"].data = 0.1 * rng.standard_normal(net.params["fc2.w"].shape)

    views = rng.uniform(0.0, 1.0, (2, 2, 1, 6, 6))
    hr = rng.uniform(0.0, 1.0, (2, 1, 18, 18))
    mask = (rng.uniform(size=hr.shape) > 0.2).astype(np.float64)
    merged = {f"hr.{k}": v for k, v in params.items()}
    merged.update({f"sn.{k}": v for k, v in net.params.items()})

    def forward():
        sr = highresnet_forward_batch(views, hr_cfg, params)

        def shiftnet(a, b):
            return shiftnet_forward_batch(a, b, net, training=True, rng=np.random.default_rng(7))

        return registered_loss(sr, Tensor(hr), mask, shiftnet, lam=1e-3,
                               max_shift=2.0, differentiable_kernel=True)

    grads = backward(forward())
    eps = 1e-6
    probe_rng = np.random.default_rng(seed + 3)
    analytic, numeric = [], []
    for name, p in merged.items():
        g = grads.get(p)
        if g is None:
            raise AssertionError(f"no gradient reached {name}")
        flat = p.data.reshape(-1)
        picks = probe_rng.choice(flat.size, size=min(2, flat.size), replace=False)
        for i in picks:
            keep = flat[i]
            flat[i] = keep + eps
            hi = forward().item()
            flat[i] = keep - eps
            lo = forward().item()
            flat[i] = keep
            numeric.append((hi - lo) / (2 * eps))
            analytic.append(float(np.asarray(g).reshape(-1)[i]))
    # one probe vector for the whole graph, like the per-op checks: entries
    # with gradients at roundoff scale must not dominate the relative error
    return rel_error(np.array(analytic), np.array(numeric))


def run_gradcheck(seed=0, include_end_to_end=True):
    """Run everything; returns [(name, max_relative_error)] sorted by name."""
    rng = np.random.default_rng(seed)
    results = [(name, fn()) for name, fn in _op_checks(rng)]
    if include_end_to_end:
        results.append(("end_to_end", _end_to_end_error(seed)))
    return sorted(results)

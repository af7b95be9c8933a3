"""Fusion and registration network architectures.

The fusion network embeds each low-resolution view jointly with a shared
reference frame, collapses the embeddings pairwise in log2(K) levels with
one shared set of fusion weights, and decodes the survivor to the upscaled
output.  Set sizes that are not powers of two are padded with dummy slots
whose contribution is gated off exactly, so padding can never change the
result.

The registration network regresses a (dx, dy) translation between two
images from a stack of conv+batchnorm+relu layers and two fully connected
layers; it drives the registered training loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grad import (
    BatchNormState,
    Tensor,
    adaptive_avg_pool2d,
    as_tensor,
    batchnorm2d,
    concat,
    conv2d,
    conv_transpose2d,
    dropout,
    linear,
    maxpool2d,
    prelu,
    relu,
    reshape,
    upsample_bicubic,
)
from .lanczos import Shift

PRELU_INIT_SLOPE = 0.25


@dataclass(frozen=True)
class HighResNetConfig:
    in_channels: int = 1
    hidden_channels: int = 64
    zoom: int = 3
    use_global_residual: bool = False


@dataclass(frozen=True)
class ShiftNetConfig:
    input_side: int = 128
    channels: tuple = (64, 64, 64, 64, 128, 128, 128, 128)
    in_channels: int = 2
    fc1_width: int = 1024
    out_dim: int = 2
    dropout_rate: float = 0.5

    @property
    def flat_features(self):
        # three k2/s2 pools (after layers 2, 4, 6)
        return self.channels[-1] * (self.input_side // 8) ** 2


def _kaiming_uniform(rng, shape, fan_in, slope, dtype):
    gain = np.sqrt(2.0 / (1.0 + slope**2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def param_count(params):
    return int(sum(p.size for p in params.values()))


# -- fusion network ------------------------------------------------------------


def init_highresnet(cfg, rng=None, dtype=np.float32):
    """Parameter dict keyed by dotted layer names; biases start at zero."""
    rng = rng if rng is not None else np.random.default_rng(0)
    ch = cfg.hidden_channels
    params = {}

    def conv(name, cin, cout, k=3):
        params[f"{name}.w"] = _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, PRELU_INIT_SLOPE, dtype)
        params[f"{name}.b"] = _zeros((cout,), dtype)

    def slope(name):
        params[f"{name}.slope"] = Tensor(np.full((1,), PRELU_INIT_SLOPE, dtype=dtype), requires_grad=True)

    conv("encode.conv_in", 2 * cfg.in_channels, ch)
    slope("encode.prelu_in")
    for rb in ("encode.rb1", "encode.rb2"):
        conv(f"{rb}.conv1", ch, ch)
        slope(f"{rb}.prelu1")
        conv(f"{rb}.conv2", ch, ch)
        slope(f"{rb}.prelu2")
    conv("encode.conv_out", ch, ch)
    conv("fuse.rb.conv1", 2 * ch, 2 * ch)
    slope("fuse.rb.prelu1")
    conv("fuse.rb.conv2", 2 * ch, 2 * ch)
    slope("fuse.rb.prelu2")
    conv("fuse.merge", 2 * ch, ch)
    slope("fuse.prelu")
    # transposed-conv weight layout is [Cin, Cout, k, k]
    params["decode.deconv.w"] = _kaiming_uniform(rng, (ch, ch, 3, 3), ch * 9, PRELU_INIT_SLOPE, dtype)
    params["decode.deconv.b"] = _zeros((ch,), dtype)
    slope("decode.prelu")
    conv("decode.conv_out", ch, cfg.in_channels, k=1)
    return params


def highresnet_param_table(cfg=HighResNetConfig()):
    """Per-stage parameter counts as (label, count) rows plus the total."""
    params = init_highresnet(cfg)
    groups = [
        "encode.conv_in",
        "encode.prelu_in",
        "encode.rb1",
        "encode.rb2",
        "encode.conv_out",
        "fuse.rb",
        "fuse.merge",
        "fuse.prelu",
        "decode.deconv",
        "decode.prelu",
        "decode.conv_out",
    ]
    rows = []
    for g in groups:
        n = sum(p.size for name, p in params.items() if name == g or name.startswith(g + "."))
        rows.append((g, int(n)))
    rows.append(("total", param_count(params)))
    return rows


def residual_block(x, params, prefix):
    """x + prelu(conv(prelu(conv(x)))) with 3x3 stride-1 pad-1 convs."""
    h = conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], stride=1, pad=1)
    h = prelu(h, params[f"{prefix}.prelu1.slope"])
    h = conv2d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], stride=1, pad=1)
    h = prelu(h, params[f"{prefix}.prelu2.slope"])
    return x + h


def encode(view, ref, params):
    """Joint embedding of a view with the reference frame, [B,2C,H,W] -> [B,ch,H,W]."""
    x = concat([as_tensor(view), as_tensor(ref)], axis=1)
    x = conv2d(x, params["encode.conv_in.w"], params["encode.conv_in.b"], stride=1, pad=1)
    x = prelu(x, params["encode.prelu_in.slope"])
    x = residual_block(x, params, "encode.rb1")
    x = residual_block(x, params, "encode.rb2")
    return conv2d(x, params["encode.conv_out.w"], params["encode.conv_out.b"], stride=1, pad=1)


def fuse_pair(si, sj, params):
    """s_i + merge(inner residual block over [s_i, s_j]); weights shared everywhere."""
    x = concat([si, sj], axis=1)
    g = residual_block(x, params, "fuse.rb")
    f = conv2d(g, params["fuse.merge.w"], params["fuse.merge.b"], stride=1, pad=1)
    f = prelu(f, params["fuse.prelu.slope"])
    return si + f


def decode(state, cfg, params, ref=None):
    """Upscale the fused state by the zoom factor and project to image channels."""
    zoom = cfg.zoom
    h = conv_transpose2d(state, params["decode.deconv.w"], params["decode.deconv.b"], stride=zoom)
    target_h, target_w = state.shape[2] * zoom, state.shape[3] * zoom
    if h.shape[2] < target_h or h.shape[3] < target_w:
        raise ValueError(f"deconv output {h.shape[2:]} smaller than target {(target_h, target_w)}")
    if h.shape[2] != target_h or h.shape[3] != target_w:
        r0 = (h.shape[2] - target_h) // 2
        c0 = (h.shape[3] - target_w) // 2
        h = h[:, :, r0 : r0 + target_h, c0 : c0 + target_w]
    h = prelu(h, params["decode.prelu.slope"])
    out = conv2d(h, params["decode.conv_out.w"], params["decode.conv_out.b"], stride=1, pad=0)
    if cfg.use_global_residual:
        if ref is None:
            raise ValueError("global residual requires the reference frame")
        out = out + upsample_bicubic(Tensor(np.asarray(ref, dtype=out.dtype)), zoom)
    return out


def _lower_median(stack, axis):
    ordered = np.sort(stack, axis=axis)
    mid = (stack.shape[axis] - 1) // 2
    return np.take(ordered, mid, axis=axis)


def _reference(views, mode):
    """Reference frame over the real views of a [B,K,C,H,W] stack."""
    if mode == "median":
        return _lower_median(views, axis=1)
    if mode == "mean":
        return views.mean(axis=1)
    if mode == "none":
        return np.zeros_like(views[:, 0])
    raise ValueError(f"unknown reference mode {mode!r}")


def _next_pow2(k):
    p = 1
    while p < k:
        p *= 2
    return p


def highresnet_forward_batch(views, cfg, params, alphas=None, pad_to=None, ref_mode="median"):
    """Fuse a [B,K,C,H,W] stack of views into a [B,C,zH,zW] reconstruction.

    ``alphas`` marks which slots hold real views (1) versus dummy padding
    (0); real slots must come first.  Without it all K views are real.
    The set is padded to ``pad_to`` (default: next power of two) and
    reduced over log2 levels, pairing slot i with slot m-1-i.  Dummy
    slots are gated off exactly: their pixels are never read, so their
    content cannot influence the output.
    """
    arr = views.data if isinstance(views, Tensor) else np.asarray(views)
    if arr.ndim != 5:
        raise ValueError(f"expected [B,K,C,H,W] views, got shape {arr.shape}")
    b, k_in, c, h, w = arr.shape
    if k_in < 1:
        raise ValueError("empty view set")
    dtype = params["encode.conv_in.w"].dtype
    arr = arr.astype(dtype, copy=False)

    if alphas is None:
        alphas = np.ones(k_in, dtype=int)
    alphas = np.asarray(alphas).astype(int)
    if alphas.shape != (k_in,) or not np.isin(alphas, (0, 1)).all():
        raise ValueError(f"alphas must be {{0,1}} per view, got shape {alphas.shape}")
    if np.any(np.diff(alphas) > 0):
        raise ValueError("real views must precede dummy padding")
    k_real = int(alphas.sum())
    if k_real < 1:
        raise ValueError("need at least one real view")

    k_total = max(pad_to or 0, _next_pow2(k_in))
    if _next_pow2(k_total) != k_total:
        raise ValueError(f"padded set size must be a power of two, got {k_total}")

    real = arr[:, :k_real]
    ref = _reference(real, ref_mode)
    stacked = np.ascontiguousarray(real.transpose(1, 0, 2, 3, 4)).reshape(k_real * b, c, h, w)
    refs = np.tile(ref, (k_real, 1, 1, 1))
    states = encode(Tensor(stacked), Tensor(refs), params)

    slots = [states[i * b : (i + 1) * b] for i in range(k_real)]
    slots += [None] * (k_total - k_real)
    while len(slots) > 1:
        m = len(slots)
        half = m // 2
        live = [i for i in range(half) if slots[m - 1 - i] is not None]
        fused = {}
        if live:
            xcat = slots[live[0]] if len(live) == 1 else concat([slots[i] for i in live], axis=0)
            ycat = (
                slots[m - 1 - live[0]]
                if len(live) == 1
                else concat([slots[m - 1 - i] for i in live], axis=0)
            )
            merged = fuse_pair(xcat, ycat, params)
            for t, i in enumerate(live):
                fused[i] = merged[t * b : (t + 1) * b] if len(live) > 1 else merged
        slots = [fused.get(i, slots[i]) for i in range(half)]
    return decode(slots[0], cfg, params, ref=ref)


def highresnet_forward(views, cfg, params, alphas=None, pad_to=None, ref_mode="median"):
    """Single-scene forward: a list of [C,H,W] views to one [C,zH,zW] image."""
    mats = [v.data if isinstance(v, Tensor) else np.asarray(v) for v in views]
    if not mats:
        raise ValueError("empty view list")
    if any(m.shape != mats[0].shape for m in mats):
        raise ValueError("views must share one shape")
    batch = np.stack(mats)[None]
    out = highresnet_forward_batch(batch, cfg, params, alphas=alphas, pad_to=pad_to, ref_mode=ref_mode)
    return out[0]


# -- registration network -------------------------------------------------------


@dataclass
class ShiftNet:
    """Registration net bundle: config, learned params, batchnorm running stats."""

    cfg: ShiftNetConfig
    params: dict
    bn_states: list = field(default_factory=list)


def init_shiftnet(cfg=ShiftNetConfig(), rng=None, dtype=np.float32):
    """Build a ShiftNet with zeroed final layer (initial prediction = no shift)."""
    if cfg.input_side % 8 != 0:
        raise ValueError(f"input side must be divisible by 8, got {cfg.input_side}")
    rng = rng if rng is not None else np.random.default_rng(0)
    params = {}
    states = []
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.channels, start=1):
        params[f"conv{i}.w"] = _kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9, 0.0, dtype)
        params[f"conv{i}.b"] = _zeros((cout,), dtype)
        params[f"bn{i}.gamma"] = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
        params[f"bn{i}.beta"] = _zeros((cout,), dtype)
        states.append(BatchNormState.for_channels(cout, dtype=dtype))
        cin = cout
    flat = cfg.flat_features
    params["fc1.w"] = _kaiming_uniform(rng, (cfg.fc1_width, flat), flat, 0.0, dtype)
    params["fc1.b"] = _zeros((cfg.fc1_width,), dtype)
    params["fc2.w"] = _zeros((cfg.out_dim, cfg.fc1_width), dtype)
    return ShiftNet(cfg=cfg, params=params, bn_states=states)


def shiftnet_param_table(cfg=ShiftNetConfig()):
    net = init_shiftnet(cfg)
    rows = []
    for i in range(1, len(cfg.channels) + 1):
        conv_n = net.params[f"conv{i}.w"].size + net.params[f"conv{i}.b"].size
        bn_n = net.params[f"bn{i}.gamma"].size + net.params[f"bn{i}.beta"].size
        rows.append((f"conv{i}", int(conv_n)))
        rows.append((f"bn{i}", int(bn_n)))
    rows.append(("fc1", int(net.params["fc1.w"].size + net.params["fc1.b"].size)))
    rows.append(("fc2", int(net.params["fc2.w"].size)))
    rows.append(("total", param_count(net.params)))
    return rows


def shiftnet_forward_batch(a, b, net, training=False, rng=None):
    """Predict per-example (dx, dy) between image batches a and b.

    Inputs of any spatial size are area-averaged to the configured square
    side, channel-concatenated and pushed through the conv stack (pooling
    after layers 2, 4 and 6), then through dropout, fc1+relu and the
    bias-free output layer.  Returns an [N,2] tensor in pixels.
    """
    cfg = net.cfg
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"image batches differ: {a.shape} vs {b.shape}")
    side = cfg.input_side
    x = concat([adaptive_avg_pool2d(a, side, side), adaptive_avg_pool2d(b, side, side)], axis=1)
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} channels after pairing, got {x.shape[1]}")
    for i in range(1, len(cfg.channels) + 1):
        x = conv2d(x, net.params[f"conv{i}.w"], net.params[f"conv{i}.b"], stride=1, pad=1)
        x = batchnorm2d(x, net.params[f"bn{i}.gamma"], net.params[f"bn{i}.beta"], net.bn_states[i - 1], training)
        x = relu(x)
        if i in (2, 4, 6):
            x = maxpool2d(x, 2, 2)
    x = reshape(x, (x.shape[0], cfg.flat_features))
    x = dropout(x, cfg.dropout_rate, training, rng)
    x = relu(linear(x, net.params["fc1.w"], net.params["fc1.b"]))
    return linear(x, net.params["fc2.w"], None)


def shiftnet_forward(a, b, net, training=False, rng=None):
    """Single-pair convenience wrapper returning a Shift."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError(f"expected [C,h,w] images, got {a.shape} and {b.shape}")
    out = shiftnet_forward_batch(
        reshape(a, (1,) + a.shape), reshape(b, (1,) + b.shape), net, training=training, rng=rng
    )
    return Shift(dx=float(out.data[0, 0]), dy=float(out.data[0, 1]))

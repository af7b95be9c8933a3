"""Value oracles and finite-difference gradients for the network ops."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_grad, rel_err
from mfsr.grad import ShapeError, Tensor, backward, tsum
from mfsr.grad.ops import (
    BatchNormState,
    adaptive_avg_pool2d,
    batchnorm2d,
    bicubic_matrix,
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


def conv_reference(x, w, b, stride, pad):
    """Nested-loop convolution, the slow independent oracle."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[ni, co, i, j] = (patch * w[co]).sum() + (b[co] if b is not None else 0.0)
    return out


# -- conv2d ------------------------------------------------------------------------


def test_conv2d_identity_kernel():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    w = np.ones((1, 1, 1, 1))
    out = conv2d(Tensor(x), Tensor(w), None, stride=1, pad=0)
    assert np.array_equal(out.data, x)


def test_conv2d_full_window_sum():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    w = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
    out = conv2d(Tensor(x), Tensor(w), None, stride=1, pad=0)
    assert out.shape == (1, 1, 1, 1) and out.item() == 5.0


def test_conv2d_box_kernel_preserves_constant_interior():
    x = np.full((1, 1, 6, 6), 2.5)
    w = np.full((1, 1, 3, 3), 1.0 / 9.0)
    out = conv2d(Tensor(x), Tensor(w), None, stride=1, pad=1).data
    assert np.allclose(out[0, 0, 1:-1, 1:-1], 2.5)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 2), st.sampled_from([(1, 0), (1, 1), (2, 1)]))
def test_conv2d_matches_nested_loop_oracle(seed, k_extra, sp):
    stride, pad = sp
    rng = np.random.default_rng(seed)
    k = 1 + k_extra
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
    assert rel_err(got, conv_reference(x, w, b, stride, pad)) < 1e-12


def test_conv2d_shape_mismatch_message():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), None)


def test_conv2d_gradients_match_fd():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((2, 2, 5, 5))
    w0 = rng.standard_normal((3, 2, 3, 3))
    probe = rng.standard_normal((2, 3, 3, 3))

    def loss_of_x(arr):
        return tsum(conv2d(Tensor(arr.copy(), requires_grad=True), Tensor(w0), None,
                           stride=2, pad=1) * Tensor(probe)).item()

    def loss_of_w(arr):
        return tsum(conv2d(Tensor(x0), Tensor(arr.copy(), requires_grad=True), None,
                           stride=2, pad=1) * Tensor(probe)).item()

    tx, tw = Tensor(x0, requires_grad=True), Tensor(w0, requires_grad=True)
    grads = backward(tsum(conv2d(tx, tw, None, stride=2, pad=1) * Tensor(probe)))
    assert rel_err(grads[tx], fd_grad(loss_of_x, x0)) < 1e-6
    assert rel_err(grads[tw], fd_grad(loss_of_w, w0)) < 1e-6


# -- conv_transpose2d ----------------------------------------------------------------


def test_conv_transpose_spreads_single_tap():
    v = 2.0
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    out = conv_transpose2d(Tensor(np.full((1, 1, 1, 1), v)), Tensor(k), None, stride=3)
    assert out.shape == (1, 1, 3, 3)
    assert np.array_equal(out.data, v * k)


def test_conv_transpose_zero_input_leaves_bias():
    b = np.array([0.7, -0.3])
    out = conv_transpose2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((3, 2, 3, 3))),
                           Tensor(b), stride=2)
    assert np.allclose(out.data[0, 0], 0.7) and np.allclose(out.data[0, 1], -0.3)


def test_conv_transpose_output_extent():
    out = conv_transpose2d(Tensor(np.zeros((1, 1, 5, 4))), Tensor(np.zeros((1, 1, 3, 3))),
                           None, stride=3)
    assert out.shape == (1, 1, (5 - 1) * 3 + 3, (4 - 1) * 3 + 3)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3))
def test_conv_and_transpose_are_adjoint(seed, stride):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    y_shape = conv2d(Tensor(x), Tensor(w), None, stride=stride, pad=0).shape
    y = rng.standard_normal(y_shape)
    lhs = (conv2d(Tensor(x), Tensor(w), None, stride=stride, pad=0).data * y).sum()
    wt = np.transpose(w, (1, 0, 2, 3))  # conv weight seen from the transpose side
    back = conv_transpose2d(Tensor(y), Tensor(np.ascontiguousarray(np.transpose(wt, (1, 0, 2, 3)))),
                            None, stride=stride).data
    rhs = (x[:, :, : back.shape[2], : back.shape[3]] * back).sum()
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_conv_transpose_gradients_match_fd():
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((1, 2, 3, 3))
    w0 = rng.standard_normal((2, 3, 3, 3))
    probe = rng.standard_normal((1, 3, 9, 9))

    def loss_of_x(arr):
        return tsum(conv_transpose2d(Tensor(arr.copy(), requires_grad=True), Tensor(w0),
                                     None, stride=3) * Tensor(probe)).item()

    tx = Tensor(x0, requires_grad=True)
    grads = backward(tsum(conv_transpose2d(tx, Tensor(w0), None, stride=3) * Tensor(probe)))
    assert rel_err(grads[tx], fd_grad(loss_of_x, x0)) < 1e-6


# -- activations --------------------------------------------------------------------


def test_prelu_values():
    out = prelu(Tensor(np.array([-2.0, 3.0])), Tensor(np.array(0.25)))
    assert np.allclose(out.data, [-0.5, 3.0])


def test_prelu_slope_one_is_identity():
    x = np.linspace(-2, 2, 9)
    assert np.array_equal(prelu(Tensor(x), Tensor(np.array(1.0))).data, x)


def test_prelu_slope_zero_is_relu():
    x = np.array([-1.0, 0.0, 2.0])
    assert np.array_equal(prelu(Tensor(x), Tensor(np.array(0.0))).data, [0.0, 0.0, 2.0])
    assert np.array_equal(relu(Tensor(x)).data, [0.0, 0.0, 2.0])


def test_prelu_gradients_including_slope():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((4, 5)) + 0.01  # keep away from the kink
    probe = rng.standard_normal((4, 5))
    s0 = np.array(0.3)

    tx, ts = Tensor(x0, requires_grad=True), Tensor(s0, requires_grad=True)
    grads = backward(tsum(prelu(tx, ts) * Tensor(probe)))
    fx = fd_grad(lambda a: tsum(prelu(Tensor(a.copy()), Tensor(s0)) * Tensor(probe)).item(), x0)
    fs = fd_grad(lambda a: tsum(prelu(Tensor(x0), Tensor(a.copy())) * Tensor(probe)).item(), s0)
    assert rel_err(grads[tx], fx) < 1e-6
    assert rel_err(grads[ts], fs) < 1e-6


# -- pooling ------------------------------------------------------------------------


def test_maxpool_window():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    out = maxpool2d(Tensor(x), 2, 2)
    assert out.shape == (1, 1, 1, 1) and out.item() == 4.0


def test_maxpool_constant_halves_resolution():
    out = maxpool2d(Tensor(np.full((1, 1, 4, 6), 1.5)), 2, 2)
    assert out.shape == (1, 1, 2, 3) and np.all(out.data == 1.5)


def test_maxpool_truncates_odd_trailing_edge():
    x = np.arange(25.0).reshape(1, 1, 5, 5)
    out = maxpool2d(Tensor(x), 2, 2)
    assert out.shape == (1, 1, 2, 2)


def test_maxpool_gradient_is_one_hot_per_window():
    x0 = np.array([[1.0, 2.0], [4.0, 3.0]]).reshape(1, 1, 2, 2)
    t = Tensor(x0, requires_grad=True)
    grads = backward(tsum(maxpool2d(t, 2, 2)))
    assert np.array_equal(grads[t].reshape(2, 2), [[0, 0], [1, 0]])


def test_maxpool_tie_routes_to_first_occurrence():
    x0 = np.full((1, 1, 2, 2), 7.0)
    t = Tensor(x0, requires_grad=True)
    grads = backward(tsum(maxpool2d(t, 2, 2)))
    assert grads[t].reshape(-1)[0] == 1.0 and grads[t].sum() == 1.0


def test_maxpool_gradient_matches_fd():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((2, 2, 4, 4))

    def loss(arr):
        return tsum(maxpool2d(Tensor(arr.copy()), 2, 2)).item()

    t = Tensor(x0, requires_grad=True)
    grads = backward(tsum(maxpool2d(t, 2, 2)))
    assert rel_err(grads[t], fd_grad(loss, x0)) < 1e-6


# -- batchnorm ----------------------------------------------------------------------


def test_batchnorm_train_centers_and_scales():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((8, 3, 5, 5)) * 2.0 + 1.0
    gamma, beta = np.array([1.5, 0.5, 2.0]), np.array([0.1, -0.2, 0.0])
    st_ = BatchNormState.for_channels(3, np.float64)
    out = batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), st_, training=True).data
    mean = out.mean(axis=(0, 2, 3))
    std = out.std(axis=(0, 2, 3))
    assert np.allclose(mean, beta, atol=1e-5)
    assert np.allclose(std, gamma, atol=1e-4)


def test_batchnorm_gamma_zero_outputs_beta():
    st_ = BatchNormState.for_channels(2, np.float64)
    x = np.random.default_rng(5).standard_normal((4, 2, 3, 3))
    out = batchnorm2d(Tensor(x), Tensor(np.zeros(2)), Tensor(np.array([0.3, -1.0])), st_, True)
    assert np.allclose(out.data[:, 0], 0.3) and np.allclose(out.data[:, 1], -1.0)


def test_batchnorm_normalized_input_passes_through():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((16, 2, 8, 8))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    st_ = BatchNormState.for_channels(2, np.float64)
    out = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, True).data
    assert np.allclose(out, x, atol=1e-4)


def test_batchnorm_train_batch_of_one_rejected():
    st_ = BatchNormState.for_channels(1, np.float64)
    with pytest.raises(ValueError):
        batchnorm2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                    st_, training=True)


def test_batchnorm_eval_uses_running_stats():
    st_ = BatchNormState.for_channels(1, np.float64)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 1, 6, 6)) * 3.0 + 2.0
    for _ in range(200):
        batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), st_, training=True)
    out = batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), st_, training=False).data
    assert abs(out.mean()) < 1e-2 and abs(out.std() - 1.0) < 1e-2


def test_batchnorm_gradients_match_fd():
    rng = np.random.default_rng(8)
    x0 = rng.standard_normal((3, 2, 4, 4))
    probe = rng.standard_normal(x0.shape)
    g0, b0 = np.array([1.2, 0.8]), np.array([0.1, -0.4])

    def make_loss(x, g, b):
        st_ = BatchNormState.for_channels(2, np.float64)
        return tsum(batchnorm2d(x, g, b, st_, training=True) * Tensor(probe))

    tx = Tensor(x0, requires_grad=True)
    tg = Tensor(g0, requires_grad=True)
    tb = Tensor(b0, requires_grad=True)
    grads = backward(make_loss(tx, tg, tb))
    assert rel_err(grads[tx], fd_grad(lambda a: make_loss(Tensor(a.copy()), Tensor(g0), Tensor(b0)).item(), x0)) < 1e-5
    assert rel_err(grads[tg], fd_grad(lambda a: make_loss(Tensor(x0), Tensor(a.copy()), Tensor(b0)).item(), g0)) < 1e-6
    assert rel_err(grads[tb], fd_grad(lambda a: make_loss(Tensor(x0), Tensor(g0), Tensor(a.copy())).item(), b0)) < 1e-6


# -- linear and dropout --------------------------------------------------------------


def test_linear_identity_weight():
    x = np.arange(6.0).reshape(2, 3)
    out = linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_linear_dot_product_example():
    out = linear(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0, 4.0]])),
                 Tensor(np.array([1.0])))
    assert out.data.reshape(-1).tolist() == [12.0]


def test_linear_no_bias_and_dimension_error():
    out = linear(Tensor(np.ones((1, 2))), Tensor(np.ones((3, 2))), None)
    assert out.shape == (1, 3)
    with pytest.raises(ShapeError):
        linear(Tensor(np.ones((1, 3))), Tensor(np.ones((3, 2))), None)


def test_dropout_identity_when_p_zero_or_eval():
    x = np.random.default_rng(9).standard_normal((5, 5))
    assert np.array_equal(dropout(Tensor(x), 0.0, training=True,
                                  rng=np.random.default_rng(0)).data, x)
    assert np.array_equal(dropout(Tensor(x), 0.7, training=False).data, x)


def test_dropout_rate_and_mean_preservation():
    n = 100_000
    x = np.ones(n)
    out = dropout(Tensor(x), 0.5, training=True, rng=np.random.default_rng(10)).data
    survivors = np.count_nonzero(out) / n
    assert abs(survivors - 0.5) < 0.01
    assert abs(out.mean() - 1.0) < 0.01


def test_dropout_p_one_rejected():
    with pytest.raises(ValueError):
        dropout(Tensor(np.ones(3)), 1.0, training=True, rng=np.random.default_rng(0))


def test_dropout_deterministic_under_fixed_seed():
    x = np.ones((4, 4))
    a = dropout(Tensor(x), 0.5, training=True, rng=np.random.default_rng(3)).data
    b = dropout(Tensor(x), 0.5, training=True, rng=np.random.default_rng(3)).data
    assert np.array_equal(a, b)


# -- resampling ----------------------------------------------------------------------


def test_bicubic_constant_preserved():
    out = upsample_bicubic(Tensor(np.full((1, 1, 5, 5), 0.42)), 3).data
    assert np.allclose(out, 0.42, atol=1e-12)


def test_bicubic_scale_one_identity():
    x = np.random.default_rng(11).standard_normal((1, 2, 6, 6))
    out = upsample_bicubic(Tensor(x), 1).data
    assert np.allclose(out, x, atol=1e-6)


def test_bicubic_ramp_interior():
    # the a=-0.75 kernel is first-order accurate only: a ramp deviates by
    # exactly |4a+2|/27 = 1/27 at third-pixel offsets, and is exact on-sample
    h = 8
    ramp = np.tile(np.arange(h, dtype=np.float64), (h, 1)).reshape(1, 1, h, h)
    out = upsample_bicubic(Tensor(ramp), 3).data[0, 0]
    expect = (np.arange(3 * h) - 1.0) / 3.0
    dev = np.abs(out[12, 6:-6] - expect[6:-6])
    assert dev.max() <= 1.0 / 27.0 + 1e-12
    assert np.allclose(out[12, 7:-6:3], expect[7:-6:3], atol=1e-12)


def test_bicubic_ramp_exact_for_catmull_rom_kernel():
    h = 8
    ramp = np.arange(h, dtype=np.float64)
    m = bicubic_matrix(h, 3 * h, a=-0.5)
    out = m @ ramp
    expect = (np.arange(3 * h) - 1.0) / 3.0
    assert np.abs(out[6:-6] - expect[6:-6]).max() < 1e-12


def test_bicubic_matrix_rows_sum_to_one():
    m = bicubic_matrix(7, 21)
    assert np.allclose(m.sum(axis=1), 1.0, atol=1e-12)


def test_adaptive_pool_bin_convention():
    x = np.arange(5.0).reshape(1, 1, 1, 5)
    out = adaptive_avg_pool2d(Tensor(x), 1, 3).data.reshape(-1)
    assert np.allclose(out, [0.5, 2.0, 3.5])


def test_adaptive_pool_identity_when_same_size():
    x = np.random.default_rng(12).standard_normal((2, 3, 4, 4))
    assert np.allclose(adaptive_avg_pool2d(Tensor(x), 4, 4).data, x)


def test_adaptive_pool_global_mean():
    x = np.random.default_rng(13).standard_normal((2, 3, 5, 7))
    out = adaptive_avg_pool2d(Tensor(x), 1, 1).data
    assert np.allclose(out.reshape(2, 3), x.mean(axis=(2, 3)))


def test_separable_transform_matches_einsum():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((2, 2, 5, 6))
    row = rng.standard_normal((4, 5))
    col = rng.standard_normal((3, 6))
    out = separable_transform(Tensor(x), row, col).data
    assert np.allclose(out, np.einsum("oi,ncij,pj->ncop", row, x, col))


def test_clip_values_and_gradient_zero_outside():
    x0 = np.array([-2.0, -0.5, 0.5, 2.0])
    t = Tensor(x0, requires_grad=True)
    out = clip(t, -1.0, 1.0)
    assert np.allclose(out.data, [-1.0, -0.5, 0.5, 1.0])
    grads = backward(tsum(out))
    assert np.array_equal(grads[t], [0.0, 1.0, 1.0, 0.0])

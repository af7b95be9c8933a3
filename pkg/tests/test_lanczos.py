"""Windowed-sinc shifting: kernel identities, resampling accuracy, and the
registration-corrected loss."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_grad, rel_err
from mfsr.grad import Tensor, backward
from mfsr.lanczos import (
    Shift,
    lanczos_kernel,
    registered_loss,
    shift_image,
    shift_matrix,
    shift_penalty,
    shift_tensor,
)
from mfsr.metrics import cpsnr
from mfsr.models import ShiftNetConfig, init_shiftnet, shiftnet_forward_batch


def smooth_image(side, seed=0, cutoff=6):
    """Band-limited test image in [0,1]; low-pass keeps resampling honest."""
    rng = np.random.default_rng(seed)
    spec = np.fft.rfft2(rng.standard_normal((side, side)))
    fy = np.fft.fftfreq(side)[:, None] * side
    fx = np.fft.rfftfreq(side)[None, :] * side
    spec[np.hypot(fy, fx) > cutoff] = 0.0
    img = np.fft.irfft2(spec, s=(side, side))
    img -= img.min()
    return img / img.max()


# -- kernel ------------------------------------------------------------------------


def test_integer_shift_kernel_is_one_hot():
    k = lanczos_kernel(0.0)
    assert k.taps[3] == 1.0 and np.count_nonzero(k.taps) == 1 and k.anchor == 0
    k2 = lanczos_kernel(2.0)
    assert k2.taps[3] == 1.0 and np.count_nonzero(k2.taps) == 1 and k2.anchor == 2


def test_half_shift_taps_are_symmetric():
    """At a half-sample offset the windowed sinc is sampled at +-0.5, +-1.5, ...
    so the live taps pair up; the seventh sample lands outside the window."""
    k = lanczos_kernel(0.5)
    assert k.anchor == 1
    taps = k.taps
    if taps[0] == 0.0:
        core = taps[1:]
    else:
        assert taps[-1] == 0.0
        core = taps[:-1]
    assert np.allclose(core, core[::-1], atol=1e-12)
    assert (core > 0).sum() + (core < 0).sum() == len(core)


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10, allow_nan=False), st.integers(1, 4))
def test_kernel_weights_sum_to_one(delta, a):
    k = lanczos_kernel(delta, a=a)
    assert len(k.taps) == 2 * a + 1
    assert abs(k.taps.sum() - 1.0) < 1e-12


def test_shift_matrix_rows_sum_to_one():
    m = shift_matrix(16, 0.37)
    assert np.allclose(m.sum(axis=1), 1.0, atol=1e-12)


# -- image shifting -----------------------------------------------------------------


def test_zero_shift_is_exact_identity():
    img = smooth_image(24, seed=1)
    out = shift_image(img, Shift(0.0, 0.0))
    assert np.abs(out - img).max() <= 1e-12


def test_integer_shift_matches_roll_interior():
    img = smooth_image(24, seed=2)
    out = shift_image(img, Shift(3.0, -2.0))
    rolled = np.roll(np.roll(img, 3, axis=1), -2, axis=0)
    assert np.abs(out[6:-6, 6:-6] - rolled[6:-6, 6:-6]).max() <= 1e-6


def test_round_trip_interior_psnr():
    img = smooth_image(32, seed=3)
    back = shift_image(shift_image(img, Shift(0.4, -0.7)), Shift(-0.4, 0.7))
    crop = np.s_[6:-6, 6:-6]
    mse = np.mean((back[crop] - img[crop]) ** 2)
    psnr = 10 * np.log10(1.0 / mse)
    assert psnr >= 50.0


def test_shift_is_linear_in_the_image():
    a = smooth_image(20, seed=4)
    b = smooth_image(20, seed=5)
    s = Shift(0.3, 0.6)
    lhs = shift_image(2.0 * a + 0.5 * b, s)
    rhs = 2.0 * shift_image(a, s) + 0.5 * shift_image(b, s)
    assert np.abs(lhs - rhs).max() < 1e-9


def test_successive_shifts_compose_approximately():
    img = smooth_image(32, seed=6)
    one = shift_image(img, Shift(0.7, 0.2))
    two = shift_image(shift_image(img, Shift(0.4, 0.1)), Shift(0.3, 0.1))
    crop = np.s_[8:-8, 8:-8]
    mse = np.mean((one[crop] - two[crop]) ** 2)
    assert 10 * np.log10(1.0 / mse) >= 45.0


def test_shift_magnitude_cap_enforced():
    img = smooth_image(16, seed=7)
    with pytest.raises(ValueError):
        shift_image(img, Shift(99.0, 0.0))


def test_batched_tensor_shift_matches_plain_shift():
    imgs = np.stack([smooth_image(18, seed=s) for s in (8, 9)])[:, None]
    deltas = np.array([[0.25, -0.4], [-1.3, 0.8]])
    out = shift_tensor(Tensor(imgs), Tensor(deltas)).data
    for i in range(2):
        ref = shift_image(imgs[i, 0], Shift(*deltas[i]))
        assert np.abs(out[i, 0] - ref).max() < 1e-12


def test_shift_tensor_image_gradient_matches_fd():
    rng = np.random.default_rng(10)
    x0 = rng.uniform(size=(2, 1, 8, 8))
    deltas = np.array([[0.3, -0.2], [0.9, 0.4]])
    probe = rng.standard_normal(x0.shape)

    def loss(arr):
        return (shift_tensor(Tensor(arr.copy()), Tensor(deltas)).data * probe).sum()

    t = Tensor(x0, requires_grad=True)
    from mfsr.grad import tsum

    grads = backward(tsum(shift_tensor(t, Tensor(deltas)) * Tensor(probe)))
    assert rel_err(grads[t], fd_grad(loss, x0)) < 1e-6


def test_shift_tensor_delta_gradient_matches_fd():
    rng = np.random.default_rng(11)
    x0 = rng.uniform(size=(2, 1, 8, 8))
    d0 = np.array([[0.3, -0.2], [0.9, 0.4]])
    probe = rng.standard_normal(x0.shape)
    from mfsr.grad import tsum

    def loss(d):
        return (shift_tensor(Tensor(x0), Tensor(d.copy()),
                             differentiable_kernel=True).data * probe).sum()

    td = Tensor(d0, requires_grad=True)
    grads = backward(tsum(shift_tensor(Tensor(x0), td, differentiable_kernel=True) * Tensor(probe)))
    assert rel_err(grads[td], fd_grad(loss, d0)) < 1e-6


def test_frozen_kernel_blocks_delta_gradient():
    x0 = np.random.default_rng(12).uniform(size=(1, 1, 8, 8))
    tx = Tensor(x0, requires_grad=True)
    td = Tensor(np.array([[0.4, 0.1]]), requires_grad=True)
    from mfsr.grad import tsum

    grads = backward(tsum(shift_tensor(tx, td, differentiable_kernel=False)))
    assert tx in grads and td not in grads


# -- penalty and combined loss --------------------------------------------------------


def test_penalty_is_mean_euclidean_norm():
    d = Tensor(np.array([[3.0, 4.0], [0.0, 0.0]]), requires_grad=True)
    loss = shift_penalty(d)
    assert loss.item() == pytest.approx(2.5)
    grads = backward(loss)  # zero row must not produce NaN
    assert np.isfinite(grads[d]).all()
    assert np.allclose(grads[d][0], [0.3, 0.4])


def _tiny_shiftnet(seed):
    return init_shiftnet(ShiftNetConfig(input_side=16, channels=(4,) * 8, fc1_width=16),
                         rng=np.random.default_rng(seed), dtype=np.float64)


def test_registered_loss_zero_head_matches_plain_loss():
    """With the head at zero the predicted shift is (0,0): identity resample,
    zero penalty contribution."""
    from mfsr.metrics import clear_mse_loss

    rng = np.random.default_rng(13)
    sr = rng.uniform(size=(2, 1, 18, 18))
    hr = rng.uniform(size=(2, 1, 18, 18))
    mask = np.ones_like(hr)
    net = _tiny_shiftnet(14)

    def shiftnet(a, b):
        return shiftnet_forward_batch(a, b, net, training=False)

    reg = registered_loss(Tensor(sr), Tensor(hr), mask, shiftnet, lam=1e-6)
    plain = clear_mse_loss(Tensor(sr), Tensor(hr), mask)
    assert reg.item() == pytest.approx(plain.item(), abs=1e-12)


def test_registered_loss_with_oracle_shift_beats_unregistered():
    """A reconstruction that is only misaligned scores near zero once the
    known shift is applied before comparison."""
    from mfsr.metrics import clear_mse_loss

    hr = smooth_image(30, seed=15)[None, None]
    sr = shift_image(hr[0, 0], Shift(1.3, -0.8))[None, None]
    mask = np.ones_like(hr)

    def oracle(a, b):
        return Tensor(np.array([[-1.3, 0.8]]))

    reg = registered_loss(Tensor(sr), Tensor(hr), mask, oracle, lam=0.0)
    plain = clear_mse_loss(Tensor(sr), Tensor(hr), mask)
    assert reg.item() < 0.2 * plain.item()


def test_registered_loss_penalty_scales_with_lambda():
    rng = np.random.default_rng(16)
    sr = rng.uniform(size=(1, 1, 18, 18))
    hr = rng.uniform(size=(1, 1, 18, 18))
    mask = np.ones_like(hr)

    def fixed(a, b):
        return Tensor(np.array([[0.6, -0.8]]))  # norm exactly 1.0

    lo = registered_loss(Tensor(sr), Tensor(hr), mask, fixed, lam=0.0)
    hi = registered_loss(Tensor(sr), Tensor(hr), mask, fixed, lam=0.5)
    assert hi.item() - lo.item() == pytest.approx(0.5, abs=1e-9)


def test_registered_loss_clamps_wild_predictions():
    rng = np.random.default_rng(17)
    sr = rng.uniform(size=(1, 1, 18, 18))
    hr = rng.uniform(size=(1, 1, 18, 18))
    mask = np.ones_like(hr)

    def wild(a, b):
        return Tensor(np.array([[500.0, -500.0]]))

    loss = registered_loss(Tensor(sr), Tensor(hr), mask, wild, lam=0.0, max_shift=2.0)
    assert np.isfinite(loss.item())


def test_registered_loss_gradient_reaches_sr():
    rng = np.random.default_rng(18)
    sr0 = rng.uniform(size=(1, 1, 16, 16))
    hr = rng.uniform(size=(1, 1, 16, 16))
    mask = np.ones_like(hr)

    def fixed(a, b):
        return Tensor(np.array([[0.35, -0.15]]))

    def loss_fn(arr):
        return registered_loss(Tensor(arr.copy(), requires_grad=True), Tensor(hr), mask,
                               fixed, lam=0.0).item()

    t = Tensor(sr0, requires_grad=True)
    grads = backward(registered_loss(t, Tensor(hr), mask, fixed, lam=0.0))
    assert rel_err(grads[t], fd_grad(loss_fn, sr0)) < 1e-5


def test_shifted_view_cpsnr_recovers_after_alignment():
    img = smooth_image(40, seed=19)
    shifted = shift_image(img, Shift(0.8, 0.3))
    realigned = shift_image(shifted, Shift(-0.8, -0.3))
    crop = np.s_[8:-8, 8:-8]
    mask = np.ones_like(img)
    before = cpsnr(img[crop], shifted[crop], mask[crop])
    after = cpsnr(img[crop], realigned[crop], mask[crop])
    assert after > before + 10.0

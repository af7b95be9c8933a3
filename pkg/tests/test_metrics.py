"""Scoring stack: bias removal, the capped PSNR, offset search, leaderboard
aggregation, and the differentiable masked loss."""

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_grad, rel_err
from mfsr.grad import Tensor, backward
from mfsr.metrics import (
    brightness_bias,
    clear_mse_loss,
    cpsnr,
    leaderboard_score,
    mse_loss,
    registered_cpsnr,
    write_report_csv,
)


def slow_reference_score(hr, sr, mask, border=3):
    """Deliberately naive re-implementation of the offset-searched score.

    Written independently of the library code: explicit python loops,
    per-window bias and MSE from first principles.
    """
    hr = np.asarray(hr, dtype=np.float64)
    sr = np.asarray(sr, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    h, w = hr.shape
    core = sr[border : h - border, border : w - border]
    ch, cw = core.shape
    best = -np.inf
    for u in range(2 * border + 1):
        for v in range(2 * border + 1):
            vals_h, vals_s = [], []
            for i in range(ch):
                for j in range(cw):
                    if mask[u + i, v + j] > 0:
                        vals_h.append(hr[u + i, v + j])
                        vals_s.append(core[i, j])
            if not vals_h:
                continue
            diff = [a - b for a, b in zip(vals_h, vals_s)]
            b = sum(diff) / len(diff)
            cmse = sum((d - b) ** 2 for d in diff) / len(diff)
            score = min(-10.0 * np.log10(max(cmse, 1e-10)), 100.0)
            best = max(best, score)
    return best


# -- cpsnr ---------------------------------------------------------------------


def test_bias_is_mean_clear_difference():
    sr = np.zeros((4, 4))
    hr = np.full((4, 4), 0.5)
    assert brightness_bias(hr, sr, np.ones((4, 4))) == pytest.approx(0.5)
    # bias estimated only where the mask is set
    mask = np.zeros((4, 4))
    mask[0, 0] = 1
    hr2 = np.zeros((4, 4))
    hr2[0, 0] = 0.25
    assert brightness_bias(hr2, sr, mask) == pytest.approx(0.25)


def test_cpsnr_hand_value_quarter_mse():
    # d = [0, 1], bias 0.5, cMSE = 0.25 -> 10*log10(4) dB
    hr = np.array([[0.0, 1.0]])
    sr = np.zeros((1, 2))
    got = cpsnr(hr, sr, np.ones((1, 2)))
    assert got == pytest.approx(10.0 * np.log10(4.0), abs=1e-12)
    assert got == pytest.approx(6.0205999, abs=1e-6)


def test_uniform_offset_scores_perfect():
    rng = np.random.default_rng(0)
    hr = rng.uniform(size=(8, 8))
    assert cpsnr(hr, hr + 0.37, np.ones_like(hr)) == 100.0
    assert cpsnr(hr, hr, np.ones_like(hr)) == 100.0


def test_cpsnr_ignores_masked_pixels():
    rng = np.random.default_rng(1)
    hr = rng.uniform(size=(10, 10))
    sr = hr + rng.normal(scale=0.05, size=hr.shape)
    mask = (rng.uniform(size=hr.shape) < 0.6).astype(float)
    base = cpsnr(hr, sr, mask)
    sr2 = sr.copy()
    sr2[mask == 0] = 123.0  # garbage under the occlusion must not matter
    assert cpsnr(hr, sr2, mask) == base


def test_cpsnr_rejects_empty_mask():
    with pytest.raises(ValueError):
        cpsnr(np.ones((3, 3)), np.ones((3, 3)), np.zeros((3, 3)))


# -- registered (offset-searched) score ------------------------------------------


@pytest.mark.parametrize("seed", range(50))
def test_registered_score_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    hr = rng.uniform(size=(32, 32))
    sr = np.clip(hr + rng.normal(scale=0.1, size=hr.shape), 0, 1)
    mask = (rng.uniform(size=hr.shape) < 0.8).astype(float)
    fast = registered_cpsnr(hr, sr, mask)
    slow = slow_reference_score(hr, sr, mask)
    assert fast == pytest.approx(slow, abs=1e-9)


def test_registered_at_least_center_crop():
    rng = np.random.default_rng(99)
    for _ in range(20):
        hr = rng.uniform(size=(24, 24))
        sr = np.clip(hr + rng.normal(scale=0.2, size=hr.shape), 0, 1)
        mask = (rng.uniform(size=hr.shape) < 0.7).astype(float)
        center = cpsnr(hr[3:-3, 3:-3], sr[3:-3, 3:-3], mask[3:-3, 3:-3])
        assert registered_cpsnr(hr, sr, mask) >= center - 1e-12


def test_registered_recovers_integer_misalignment():
    rng = np.random.default_rng(7)
    hr = rng.uniform(size=(20, 20))
    sr = np.roll(np.roll(hr, 1, axis=0), 2, axis=1)
    assert registered_cpsnr(hr, sr, np.ones_like(hr)) == 100.0


def test_registered_rejects_tiny_images():
    img = np.ones((6, 6))
    with pytest.raises(ValueError):
        registered_cpsnr(img, img, img)


# -- leaderboard --------------------------------------------------------------------


def test_leaderboard_normalization():
    report = leaderboard_score({"a": 50.0, "b": 40.0}, {"a": 45.0, "b": 44.0})
    assert report.normalized == pytest.approx([0.9, 1.1])
    assert report.aggregate == pytest.approx(1.0)
    assert report.scene_ids == ["a", "b"]


def test_leaderboard_below_one_means_improvement():
    report = leaderboard_score({"s": 48.0}, {"s": 47.0})
    assert report.aggregate < 1.0


def test_leaderboard_scene_mismatch_rejected():
    with pytest.raises(ValueError):
        leaderboard_score({"a": 1.0}, {"b": 1.0})
    with pytest.raises(ValueError):
        leaderboard_score({}, {})


def test_report_csv_round_trip(tmp_path):
    report = leaderboard_score({"x": 50.0, "y": 42.0}, {"x": 49.0, "y": 43.0})
    path = tmp_path / "report.csv"
    write_report_csv(report, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["scene_id", "cpsnr_db", "baseline_cpsnr_db", "normalized_score"]
    assert [r[0] for r in rows[1:]] == ["x", "y"]
    for row, db, bdb, norm in zip(rows[1:], report.cpsnr_db,
                                  report.baseline_cpsnr_db, report.normalized):
        assert float(row[1]) == pytest.approx(db, abs=1e-6)
        assert float(row[2]) == pytest.approx(bdb, abs=1e-6)
        assert float(row[3]) == pytest.approx(norm, abs=1e-6)


# -- differentiable loss ---------------------------------------------------------


def loss_oracle(sr, hr, mask):
    out = 0.0
    for n in range(sr.shape[0]):
        m = mask[n]
        tot = m.sum()
        if tot == 0:
            continue
        d = m * (hr[n] - sr[n])
        b = d.sum() / tot
        out += (m * (hr[n] - sr[n] - b) ** 2).sum() / tot
    return out / sr.shape[0]


def test_clear_mse_matches_numpy_oracle():
    rng = np.random.default_rng(3)
    sr = rng.uniform(size=(3, 1, 6, 6))
    hr = rng.uniform(size=(3, 1, 6, 6))
    mask = (rng.uniform(size=sr.shape) < 0.7).astype(np.float64)
    got = clear_mse_loss(Tensor(sr), Tensor(hr), mask).item()
    assert got == pytest.approx(loss_oracle(sr, hr, mask), abs=1e-14)


def test_clear_mse_empty_mask_example_contributes_zero():
    rng = np.random.default_rng(4)
    sr = rng.uniform(size=(2, 1, 4, 4))
    hr = rng.uniform(size=(2, 1, 4, 4))
    mask = np.ones_like(sr)
    mask[1] = 0.0
    got = clear_mse_loss(Tensor(sr), Tensor(hr), mask).item()
    only_first = loss_oracle(sr[:1], hr[:1], mask[:1])
    assert got == pytest.approx(only_first / 2.0, abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2, allow_nan=False), st.integers(0, 2**31 - 1))
def test_clear_mse_invariant_to_uniform_offset(c, seed):
    rng = np.random.default_rng(seed)
    sr = rng.uniform(size=(2, 1, 5, 5))
    hr = rng.uniform(size=(2, 1, 5, 5))
    mask = (rng.uniform(size=sr.shape) < 0.8).astype(np.float64)
    if not mask.sum(axis=(1, 2, 3)).all():
        mask[:, :, 0, 0] = 1.0
    a = clear_mse_loss(Tensor(sr), Tensor(hr), mask).item()
    b = clear_mse_loss(Tensor(sr + c), Tensor(hr), mask).item()
    assert b == pytest.approx(a, abs=1e-10)


def test_clear_mse_gradient_matches_fd():
    rng = np.random.default_rng(5)
    sr0 = rng.uniform(size=(2, 1, 5, 5))
    hr = rng.uniform(size=(2, 1, 5, 5))
    mask = (rng.uniform(size=sr0.shape) < 0.75).astype(np.float64)

    def f(arr):
        return clear_mse_loss(Tensor(arr.copy()), Tensor(hr), mask).item()

    t = Tensor(sr0, requires_grad=True)
    grads = backward(clear_mse_loss(t, Tensor(hr), mask))
    assert rel_err(grads[t], fd_grad(f, sr0)) < 1e-6


def test_clear_mse_gradient_zero_on_masked_pixels():
    rng = np.random.default_rng(6)
    sr0 = rng.uniform(size=(1, 1, 5, 5))
    hr = rng.uniform(size=(1, 1, 5, 5))
    mask = np.ones_like(sr0)
    mask[0, 0, 2, 3] = 0.0
    t = Tensor(sr0, requires_grad=True)
    grads = backward(clear_mse_loss(t, Tensor(hr), mask))
    assert grads[t][0, 0, 2, 3] == 0.0


def test_mse_loss_hand_value_and_shape_check():
    sr = Tensor(np.zeros((1, 1, 2, 2)))
    hr = Tensor(np.full((1, 1, 2, 2), 3.0))
    assert mse_loss(sr, hr).item() == pytest.approx(9.0)
    with pytest.raises(ValueError):
        mse_loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

"""Quality metrics for reconstructed images.

Scoring follows the satellite-imaging competition convention: a brightness
bias is removed over the clear (unoccluded) pixels, the mean squared error
is taken over the same pixels, and the final PSNR is maximized over small
integer translations so that a merely shifted reconstruction is not
punished.  The same bias-corrected MSE is also available as a
differentiable training loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .grad import Tensor, as_tensor, tmean, tsum

CMSE_FLOOR = 1e-10
MAX_DB = 100.0


def _flat(img):
    return np.asarray(img, dtype=np.float64).reshape(-1)


def _clear_values(hr, sr, mask):
    hr, sr, mask = _flat(hr), _flat(sr), _flat(mask)
    if not (hr.shape == sr.shape == mask.shape):
        raise ValueError(f"shape mismatch: hr {hr.shape}, sr {sr.shape}, mask {mask.shape}")
    clear = mask > 0
    if not clear.any():
        raise ValueError("no clear pixels in mask")
    return hr[clear], sr[clear]


def brightness_bias(hr, sr, mask):
    """Mean of (hr - sr) over clear pixels."""
    h, s = _clear_values(hr, sr, mask)
    return float(np.mean(h - s))


def cpsnr(hr, sr, mask):
    """Bias-corrected PSNR over clear pixels, in dB, capped at 100.

    cMSE = mean over clear pixels of (hr - sr - b)^2 with b the brightness
    bias; the cMSE is floored at 1e-10 so perfect reconstructions score
    exactly 100 dB.
    """
    h, s = _clear_values(hr, sr, mask)
    d = h - s
    cmse = float(np.mean((d - d.mean()) ** 2))
    return float(min(-10.0 * np.log10(max(cmse, CMSE_FLOOR)), MAX_DB))


def registered_cpsnr(hr, sr, mask, border=3):
    """Max cpsnr over integer offsets of a border-cropped reconstruction.

    ``sr`` loses ``border`` pixels on each side; ``hr`` and ``mask`` are
    cropped at every offset in {0..2*border}^2 and the best score wins.
    Offsets whose window has no clear pixel are skipped.
    """
    hr = np.asarray(hr, dtype=np.float64).squeeze()
    sr = np.asarray(sr, dtype=np.float64).squeeze()
    mask = np.asarray(mask, dtype=np.float64).squeeze()
    if hr.ndim != 2 or hr.shape != sr.shape or hr.shape != mask.shape:
        raise ValueError(f"expected matching 2-d images, got {hr.shape}/{sr.shape}/{mask.shape}")
    h, w = hr.shape
    if h < 2 * border + 1 or w < 2 * border + 1:
        raise ValueError(f"image {h}x{w} smaller than the {2 * border + 1}-pixel search window")
    core = sr[border : h - border, border : w - border]
    ch, cw = core.shape
    best = None
    for u in range(2 * border + 1):
        for v in range(2 * border + 1):
            win_mask = mask[u : u + ch, v : v + cw]
            if not (win_mask > 0).any():
                continue
            score = cpsnr(hr[u : u + ch, v : v + cw], core, win_mask)
            if best is None or score > best:
                best = score
    if best is None:
        raise ValueError("no offset window contains a clear pixel")
    return best


@dataclass
class ScoreReport:
    """Per-scene scores plus the baseline-normalized aggregate (lower is better)."""

    scene_ids: list
    cpsnr_db: list
    baseline_cpsnr_db: list
    normalized: list
    aggregate: float


def leaderboard_score(model_db, baseline_db):
    """Mean over scenes of baseline_cPSNR / model_cPSNR.

    Both arguments map scene id to a cPSNR in dB; the scene sets must
    match.  A normalized score below 1 means the model beat the baseline.
    """
    if set(model_db) != set(baseline_db):
        missing = set(model_db) ^ set(baseline_db)
        raise ValueError(f"scene sets differ: {sorted(missing)}")
    if not model_db:
        raise ValueError("empty scene set")
    ids = sorted(model_db)
    normalized = [baseline_db[i] / model_db[i] for i in ids]
    return ScoreReport(
        scene_ids=ids,
        cpsnr_db=[model_db[i] for i in ids],
        baseline_cpsnr_db=[baseline_db[i] for i in ids],
        normalized=normalized,
        aggregate=float(np.mean(normalized)),
    )


def write_report_csv(report, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "cpsnr_db", "baseline_cpsnr_db", "normalized_score"])
        for sid, db, bdb, norm in zip(
            report.scene_ids, report.cpsnr_db, report.baseline_cpsnr_db, report.normalized
        ):
            writer.writerow([sid, f"{db:.6f}", f"{bdb:.6f}", f"{norm:.6f}"])


# -- differentiable training losses -------------------------------------------


def clear_mse_loss(sr, hr, mask):
    """Brightness-bias-corrected MSE over masked pixels, batch-averaged.

    sr/hr are [N,C,H,W] tensors; mask is a constant {0,1} array of the
    same shape.  Per example: b = sum(mask*(hr-sr))/sum(mask), then
    cMSE = sum(mask*(hr-sr-b)^2)/sum(mask).  Examples whose mask is empty
    contribute zero (guarded denominator).
    """
    sr, hr = as_tensor(sr), as_tensor(hr)
    m = np.asarray(mask, dtype=sr.dtype)
    if sr.shape != hr.shape or sr.shape != m.shape:
        raise ValueError(f"shape mismatch: sr {sr.shape}, hr {hr.shape}, mask {m.shape}")
    if sr.ndim != 4:
        raise ValueError(f"expected [N,C,H,W], got {sr.shape}")
    axes = (1, 2, 3)
    inv_count = (1.0 / np.maximum(m.sum(axis=axes, keepdims=True), 1.0)).astype(sr.dtype)
    mt = Tensor(m)
    diff = (hr - sr) * mt
    bias = tsum(diff, axis=axes, keepdims=True) * Tensor(inv_count)
    resid = diff - bias * mt
    cmse = tsum(resid * resid, axis=axes, keepdims=True) * Tensor(inv_count)
    return tmean(cmse)


def mse_loss(sr, hr):
    """Plain mean squared error over all pixels."""
    sr, hr = as_tensor(sr), as_tensor(hr)
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: sr {sr.shape} vs hr {hr.shape}")
    diff = hr - sr
    return tmean(diff * diff)

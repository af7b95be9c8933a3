"""Parameter-free reference reconstructions the learned model must beat."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grad.ops import bicubic_matrix
from .scenes import clearance


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "esa"
    n_clearest: int = 9

    def validate(self):
        if self.method not in ("esa", "bicubic"):
            raise ValueError(f"unknown baseline method {self.method!r}")
        if self.n_clearest < 1:
            raise ValueError("n_clearest must be >= 1")


def _bicubic_up(img, zoom):
    """Plain-array bicubic upsample of a [1,h,w] image by an integer factor."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2], img.shape[-1]
    row = bicubic_matrix(h, h * zoom)
    col = bicubic_matrix(w, w * zoom)
    return np.matmul(row, np.matmul(img, col.T))


def bicubic_sisr(view, zoom=3):
    """Single-image baseline: bicubic zoom of one view."""
    return _bicubic_up(view, zoom)


def _clearest_order(scene):
    counts = np.asarray(clearance(scene))
    return np.argsort(-counts, kind="stable")


def esa_baseline(scene, n_clearest=9, zoom=3):
    """Upsample the n clearest views bicubically and average them.

    Views tie-break by ascending index, so the result is invariant to
    input permutation given the clearance multiset.
    """
    kp = len(scene.lr_views)
    if n_clearest > kp:
        raise ValueError(f"n_clearest {n_clearest} exceeds the {kp} available views")
    order = _clearest_order(scene)[:n_clearest]
    ups = [_bicubic_up(scene.lr_views[i], zoom) for i in order]
    return np.mean(ups, axis=0)


def baseline_sr(scene, cfg=BaselineConfig(), zoom=3):
    cfg.validate()
    if cfg.method == "bicubic":
        best = int(_clearest_order(scene)[0])
        return bicubic_sisr(scene.lr_views[best], zoom)
    return esa_baseline(scene, min(cfg.n_clearest, len(scene.lr_views)), zoom)

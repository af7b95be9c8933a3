"""Adam with bias-corrected moment estimates.

State lives in a plain dict keyed like the parameter dict, so one step
function serves any collection of named tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamConfig:
    lr: float = 0.0007
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params):
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(m=m, v=v, t=0)


def adam_step(params, grads, state, cfg, lr=None):
    """One in-place update of every parameter that received a gradient.

    ``grads`` maps names to numpy arrays; names missing from it are left
    untouched (their moments do not advance either).  ``lr`` overrides
    ``cfg.lr`` when the caller runs a schedule.
    """
    state.t += 1
    step_lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        g = np.asarray(g, dtype=p.dtype)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (step_lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype, copy=False)

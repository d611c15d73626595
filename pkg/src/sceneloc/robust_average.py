"""Robust averaging of ensemble predictions by an iterated weighted mean:
a Weiszfeld (geometric median) phase followed by Gaussian mean-shift, with
reverse-mode differentiation through the whole unrolled iteration.

The module has no learnable parameters; gradients flow only to the inputs.
Weights are differentiated as functions of the iterate and the inputs (full
product rule), not frozen per iteration.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigInvalid, EmptyInput, StaleState


@dataclass(frozen=True)
class GMConfig:
    weiszfeld_iters: int = 10
    meanshift_iters: int = 10
    sigma: float = 0.025
    epsilon_guard: float = 1e-9

    def __post_init__(self):
        if self.weiszfeld_iters < 0 or self.meanshift_iters < 0:
            raise ConfigInvalid("iteration counts must be nonnegative")
        if self.sigma <= 0 or self.epsilon_guard <= 0:
            raise ConfigInvalid("sigma and epsilon_guard must be positive")

    @property
    def total_iters(self):
        return self.weiszfeld_iters + self.meanshift_iters


@dataclass
class GMState:
    """Everything gm_backward needs: the inputs, every iterate, the weights
    of every iteration, and whether the iteration actually moved (all-zero
    weights keep the iterate in place)."""

    points: np.ndarray
    config: GMConfig
    iterates: np.ndarray
    weights: np.ndarray
    stepped: np.ndarray


def gm_forward(points, config=GMConfig()):
    """Robust average of points (T, 3). Returns (q (3,), GMState).

    Starts at the mean; weiszfeld_iters iterations with weights
    1/max(dist, epsilon_guard), then meanshift_iters with Gaussian weights
    exp(-dist^2 / (2 sigma^2))."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 0:
        raise EmptyInput("robust average needs at least one point")
    t = pts.shape[0]
    n_it = config.total_iters
    q = pts.mean(axis=0)
    iterates = np.empty((n_it + 1, 3))
    iterates[0] = q
    weights = np.zeros((n_it, t))
    stepped = np.zeros(n_it, dtype=bool)
    inv2s2 = 1.0 / (2.0 * config.sigma**2)
    for it in range(n_it):
        r = np.linalg.norm(q - pts, axis=1)
        if it < config.weiszfeld_iters:
            w = 1.0 / np.maximum(r, config.epsilon_guard)
        else:
            w = np.exp(-r * r * inv2s2)
        sw = w.sum()
        if sw > 0.0:
            q = (w[:, None] * pts).sum(axis=0) / sw
            stepped[it] = True
        weights[it] = w
        iterates[it + 1] = q
    return q.copy(), GMState(pts.copy(), config, iterates, weights, stepped)


def gm_backward(state, dq):
    """Propagate dL/dq through the unrolled iterations; returns dL/dpoints
    (T, 3). The weights' dependence on the iterate and on the inputs is part
    of the derivative."""
    pts = state.points
    t = pts.shape[0]
    cfg = state.config
    n_it = cfg.total_iters
    if (
        state.iterates.shape != (n_it + 1, 3)
        or state.weights.shape != (n_it, t)
        or state.stepped.shape != (n_it,)
        or pts.shape != (t, 3)
    ):
        raise StaleState("GM state does not match its config; rerun gm_forward")
    g = np.asarray(dq, dtype=np.float64).copy()
    if g.shape != (3,):
        raise ConfigInvalid("upstream gradient must be a 3-vector")
    dpts = np.zeros_like(pts)
    for it in range(n_it - 1, -1, -1):
        if not state.stepped[it]:
            continue  # iterate was held: gradient passes through unchanged
        q_prev = state.iterates[it]
        q_next = state.iterates[it + 1]
        w = state.weights[it]
        sw = w.sum()
        dpts += (w / sw)[:, None] * g
        dl_dw = (pts - q_next) @ g / sw
        r = np.linalg.norm(q_prev - pts, axis=1)
        if it < cfg.weiszfeld_iters:
            dw_dr = np.where(
                r > cfg.epsilon_guard, -1.0 / np.maximum(r, cfg.epsilon_guard) ** 2, 0.0
            )
        else:
            dw_dr = -(r / cfg.sigma**2) * w
        safe_r = np.where(r > 0.0, r, 1.0)
        u = np.where((r > 0.0)[:, None], (q_prev - pts) / safe_r[:, None], 0.0)
        contrib = (dl_dw * dw_dr)[:, None] * u
        dpts -= contrib
        g = contrib.sum(axis=0)
    dpts += g[None, :] / t  # the mean initialization
    return dpts


def apply_pgm(predictions, config=GMConfig()):
    """Forward-only robust average per pixel: predictions (P, T, 3) -> (P, 3).
    Matches gm_forward applied row by row."""
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.ndim != 3 or preds.shape[2] != 3:
        raise ConfigInvalid(f"predictions must be (P, T, 3), got {preds.shape}")
    if preds.shape[0] == 0 or preds.shape[1] == 0:
        raise EmptyInput("no predictions to average")
    return kernels.pgm_batch(
        preds,
        config.weiszfeld_iters,
        config.meanshift_iters,
        config.sigma,
        config.epsilon_guard,
    )

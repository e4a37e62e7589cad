"""Scalar-state dynamic linear model: Kalman filter, backward sampler, prediction.

Observation model for one question on day t, with y the logits reported that
day and lambda the bias of each reporter's group::

    y_t = lambda_t * x_t + v_t,   v_t ~ N(0, sigma2 I)
    x_t = gamma * x_{t-1} + w_t,  w_t ~ N(0, tau2),   x_0 ~ N(mu0, c0)

Days without forecasts are pure prediction steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .domain import QuestionPanel


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class DlmParams:
    bias: np.ndarray
    obs_var: float
    drift: float = 1.0
    state_var: float = 1.0
    init_mean: float = 0.0
    init_var: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "bias", np.atleast_1d(np.asarray(self.bias, dtype=float)))
        for name in ("obs_var", "init_var"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ParameterError(f"{name} must be positive, got {v}")
        # state_var = 0 is the deterministic-drift limit
        if not (np.isfinite(self.state_var) and self.state_var >= 0):
            raise ParameterError(f"state_var must be non-negative, got {self.state_var}")


@dataclass(frozen=True)
class FilterOutput:
    pred_mean: np.ndarray
    pred_var: np.ndarray
    filt_mean: np.ndarray
    filt_var: np.ndarray
    loglik: float

    def __len__(self):
        return len(self.filt_mean)


class PanelBatch:
    """Several panels reduced to per-(question, day, group) cell statistics.

    Every quantity the sampler needs is a sum over forecasts in a cell, so
    the per-iteration cost scales with occupied cells rather than with the
    number of experts. ``cq``/``ct``/``cg`` are 0-based cell coordinates and
    ``cn``/``csy``/``csyy`` the count, sum and sum of squares of the logits.
    """

    def __init__(self, panels: Sequence[QuestionPanel], n_groups: int | None = None):
        self.panels = tuple(panels)
        self.K = len(self.panels)
        self.lengths = np.array([p.horizon for p in self.panels], dtype=np.int64)
        self.Tmax = int(self.lengths.max()) if self.K else 0
        if self.K:
            q = np.concatenate([np.full(p.n_forecasts, k, dtype=np.int64) for k, p in enumerate(self.panels)])
            t = np.concatenate([p.days - 1 for p in self.panels]).astype(np.int64)
            g = np.concatenate([p.groups - 1 for p in self.panels]).astype(np.int64)
            y = np.concatenate([p.logits for p in self.panels])
        else:
            q = t = g = np.zeros(0, np.int64)
            y = np.zeros(0)
        self.J = int(n_groups) if n_groups is not None else (int(g.max()) + 1 if g.size else 1)
        key = (q * self.Tmax + t) * self.J + g
        cells, inv = np.unique(key, return_inverse=True)
        self.cn = np.bincount(inv, minlength=cells.size).astype(float)
        self.csy = np.bincount(inv, weights=y, minlength=cells.size)
        self.csyy = np.bincount(inv, weights=y * y, minlength=cells.size)
        self.cg = cells % self.J
        self.ct = (cells // self.J) % self.Tmax if self.Tmax else cells
        self.cq = cells // (self.J * self.Tmax) if self.Tmax else cells
        self.flat = self.cq * self.Tmax + self.ct
        size = self.K * self.Tmax
        self.nobs = np.bincount(self.flat, weights=self.cn, minlength=size).reshape(self.K, self.Tmax)
        self.syy = np.bincount(self.flat, weights=self.csyy, minlength=size).reshape(self.K, self.Tmax)
        self.n_per_question = np.bincount(q, minlength=self.K)
        self.n_per_group = np.bincount(g, minlength=self.J)

    def loading_stats(self, bias: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-day sum of squared loadings and loading-weighted logits."""
        lam = np.asarray(bias, dtype=float)[self.cg]
        size = self.K * self.Tmax
        sbb = np.bincount(self.flat, weights=lam * lam * self.cn, minlength=size).reshape(self.K, self.Tmax)
        sby = np.bincount(self.flat, weights=lam * self.csy, minlength=size).reshape(self.K, self.Tmax)
        return sbb, sby

    def mask(self) -> np.ndarray:
        return np.arange(self.Tmax)[None, :] < self.lengths[:, None]


def _check(params: DlmParams, panel: QuestionPanel):
    if panel.n_forecasts and panel.groups.max() > params.bias.size:
        raise ParameterError("bias vector shorter than the largest group index")


def forward_filter(panel: QuestionPanel, params: DlmParams) -> FilterOutput:
    """Kalman filter for one question, tolerant of empty days.

    Also accumulates the marginal log-likelihood of all observed logits.
    """
    _check(params, panel)
    batch = PanelBatch([panel], params.bias.size)
    sbb, sby = batch.loading_stats(params.bias)
    one = np.ones(1)
    a, R, m, C, ll = _kernels.forward_filter(
        sbb, sby, batch.syy, batch.nobs, batch.lengths,
        one * params.drift, one * params.state_var, one * params.obs_var,
        params.init_mean, params.init_var)
    return FilterOutput(a[0], R[0], m[0], C[0], float(ll[0]))


def backward_sample(filt: FilterOutput, params: DlmParams, rng: np.random.Generator) -> np.ndarray:
    """One exact draw of the state path given all observations."""
    T = len(filt)
    if not (len(filt.pred_mean) == len(filt.pred_var) == len(filt.filt_var) == T):
        raise ValueError("filter arrays have mismatched lengths")
    z = rng.standard_normal(T + 1)
    X, _ = _kernels.backward_sample(
        filt.pred_mean[None, :], filt.pred_var[None, :], filt.filt_mean[None, :],
        filt.filt_var[None, :], np.array([T]), np.array([params.drift]),
        np.array([params.state_var]), params.init_mean, params.init_var,
        z[None, :T], z[T:])
    return X[0]


def predict_forward(x_t: float, params: DlmParams, steps: int) -> tuple[float, float]:
    """Mean and variance of the state ``steps`` days ahead of a known ``x_t``.

    The variance accumulates squared drift powers:
    tau2 * sum_{s < steps} gamma**(2 s).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    g = params.drift
    mean = g ** steps * x_t
    var = params.state_var * float(np.sum(g ** (2.0 * np.arange(steps))))
    return mean, var

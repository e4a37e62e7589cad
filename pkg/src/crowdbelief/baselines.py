"""Exponentially weighted baseline aggregators and their least-squares fits.

All three families share one recursion: the day-level aggregate ``g_t`` is
smoothed as ``p_t = alpha g_t + (1 - alpha) p_{t-1}``, with the first
observed day initializing the path and empty days carrying the previous
value forward. They differ in ``g_t``:

* EWMA  -- expertise-weighted mean of group mean probabilities;
* EWMLA -- logistic of the bias-weighted mean logit of all reports;
* EWMBA -- Beta CDF applied to the EWMA day mean.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .domain import QuestionPanel, fmt, inverse_logit

START = 0.5


class Family(str, enum.Enum):
    EWMA = "ewma"
    EWMLA = "ewmla"
    EWMBA = "ewmba"


@dataclass(frozen=True)
class EwmaParams:
    alpha: float
    weights: tuple[float, ...]

    def __post_init__(self):
        _check_alpha(self.alpha)
        _check_simplex(self.weights)


@dataclass(frozen=True)
class EwmlaParams:
    alpha: float
    bias: tuple[float, ...]

    def __post_init__(self):
        _check_alpha(self.alpha)


@dataclass(frozen=True)
class EwmbaParams:
    alpha: float
    shape1: float
    shape2: float
    weights: tuple[float, ...]

    def __post_init__(self):
        _check_alpha(self.alpha)
        if not (self.shape1 > 0 and self.shape2 > 0):
            raise ValueError("Beta shapes must be positive")
        _check_simplex(self.weights)


def _check_alpha(a):
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {a}")


def _check_simplex(w):
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be non-negative and sum to 1")


def regularized_incomplete_beta(x, a: float, b: float):
    """I_x(a, b) by continued fraction (compiled when available)."""
    if not (a > 0 and b > 0):
        raise ValueError("shapes must be positive")
    return _kernels.betainc(x, a, b)


# --- day-level aggregates ---------------------------------------------------

def group_weighted_mean(probs, groups, weights) -> float | None:
    """Weighted mean of per-group mean probabilities for one day.

    Weights are renormalized over the groups present; ``None`` means the day
    has no forecasts. If every present group has zero weight the plain mean
    of the present group means is used.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.size == 0:
        return None
    groups = np.asarray(groups, dtype=int)
    w = np.asarray(weights, dtype=float)
    present = np.unique(groups)
    means = np.array([probs[groups == g].mean() for g in present])
    wp = w[present - 1]
    if wp.sum() <= 0:
        return float(means.mean())
    return float(np.dot(wp, means) / wp.sum())


def ewmla_aggregate(probs, groups, bias) -> float | None:
    """Product of odds^(b_j / N) mapped back to a probability."""
    probs = np.asarray(probs, dtype=float)
    if probs.size == 0:
        return None
    b = np.asarray(bias, dtype=float)[np.asarray(groups, dtype=int) - 1]
    y = np.log(probs) - np.log1p(-probs)
    return float(inverse_logit(np.sum(b * y) / probs.size))


def ewmba_aggregate(probs, groups, params: EwmbaParams) -> float | None:
    pbar = group_weighted_mean(probs, groups, params.weights)
    if pbar is None:
        return None
    return float(regularized_incomplete_beta(pbar, params.shape1, params.shape2))


class DayFeatures:
    """Padded per-day group summaries for a list of panels, built once per fit."""

    def __init__(self, panels: Sequence[QuestionPanel], n_groups: int):
        self.panels = tuple(panels)
        K = len(self.panels)
        self.J = n_groups
        self.lengths = np.array([p.horizon for p in self.panels], dtype=np.int64)
        Tmax = int(self.lengths.max()) if K else 0
        self.Tmax = Tmax
        psum = np.zeros((K, Tmax, n_groups))
        ysum = np.zeros((K, Tmax, n_groups))
        cnt = np.zeros((K, Tmax, n_groups))
        for k, p in enumerate(self.panels):
            idx = (np.full(p.n_forecasts, k), p.days - 1, p.groups - 1)
            np.add.at(psum, idx, p.probs)
            np.add.at(ysum, idx, p.logits)
            np.add.at(cnt, idx, 1.0)
        self.present = cnt > 0
        self.gmean = np.where(self.present, psum / np.maximum(cnt, 1.0), 0.0)
        self.ysum = ysum
        self.n = cnt.sum(axis=2)
        self.has = self.n > 0
        self._present_f = self.present.astype(float)
        self._plain = self.gmean.sum(axis=2) / np.maximum(self.present.sum(axis=2), 1)
        self.mask = np.arange(Tmax)[None, :] < self.lengths[:, None]

    def pbar(self, weights) -> np.ndarray:
        w = np.asarray(weights, dtype=float)
        # gmean is zero for absent groups, so both sums are plain contractions
        wsum = self._present_f @ w
        num = self.gmean @ w
        return np.where(wsum > 0, num / np.where(wsum > 0, wsum, 1.0), self._plain)

    def logit_pool(self, bias) -> np.ndarray:
        b = np.asarray(bias, dtype=float)
        return inverse_logit((self.ysum @ b) / np.maximum(self.n, 1.0))

    def smooth(self, values, alpha) -> np.ndarray:
        return _kernels.ewm_recursion(values, self.has, self.lengths, alpha, START)

    def day_values(self, params) -> np.ndarray:
        if isinstance(params, EwmaParams):
            return self.pbar(params.weights)
        if isinstance(params, EwmlaParams):
            return self.logit_pool(params.bias)
        if isinstance(params, EwmbaParams):
            return regularized_incomplete_beta(self.pbar(params.weights), params.shape1, params.shape2)
        raise TypeError(f"unknown parameter type {type(params).__name__}")

    def paths(self, params) -> np.ndarray:
        return self.smooth(self.day_values(params), params.alpha)

    def split(self, padded) -> list[np.ndarray]:
        return [padded[k, :n].copy() for k, n in enumerate(self.lengths)]


def _single(panel, n_groups):
    return DayFeatures([panel], n_groups)


def ewma_path(panel: QuestionPanel, params: EwmaParams) -> np.ndarray:
    f = _single(panel, len(params.weights))
    return f.paths(params)[0, : panel.horizon]


def ewmla_path(panel: QuestionPanel, params: EwmlaParams) -> np.ndarray:
    f = _single(panel, len(params.bias))
    return f.paths(params)[0, : panel.horizon]


def ewmba_path(panel: QuestionPanel, params: EwmbaParams) -> np.ndarray:
    f = _single(panel, len(params.weights))
    return f.paths(params)[0, : panel.horizon]


def aggregate_paths(panels: Sequence[QuestionPanel], params, n_groups: int = 5) -> list[np.ndarray]:
    f = DayFeatures(panels, n_groups)
    return f.split(f.paths(params))


# --- fitting ----------------------------------------------------------------

def _softmax(v):
    e = np.exp(v - np.max(v))
    return e / e.sum()


def _unpack(family: Family, theta, J):
    alpha = float(np.clip(theta[0], 0.0, 1.0))
    if family is Family.EWMA:
        return EwmaParams(alpha, tuple(_softmax(theta[1:1 + J])))
    if family is Family.EWMLA:
        return EwmlaParams(alpha, tuple(float(v) for v in theta[1:1 + J]))
    s1, s2 = np.exp(np.clip(theta[1:3], -10.0, 10.0))
    return EwmbaParams(alpha, float(s1), float(s2), tuple(_softmax(theta[3:3 + J])))


def default_params(family, n_groups: int = 5):
    family = Family(family)
    uniform = tuple([1.0 / n_groups] * n_groups)
    if family is Family.EWMA:
        return EwmaParams(1.0, uniform)
    if family is Family.EWMLA:
        return EwmlaParams(1.0, tuple([1.0] * n_groups))
    return EwmbaParams(1.0, 1.0, 1.0, uniform)


def _default_theta(family, J):
    if family is Family.EWMA:
        return np.r_[1.0, np.zeros(J)]
    if family is Family.EWMLA:
        return np.r_[1.0, np.ones(J)]
    return np.r_[1.0, 0.0, 0.0, np.zeros(J)]


def _random_theta(family, J, rng):
    alpha = rng.uniform(0.05, 1.0)
    if family is Family.EWMA:
        return np.r_[alpha, rng.normal(0, 1, J)]
    if family is Family.EWMLA:
        return np.r_[alpha, rng.uniform(0.2, 3.0, J)]
    return np.r_[alpha, rng.normal(0, 0.7, 2), rng.normal(0, 1, J)]


def sse(features: DayFeatures, outcomes, params) -> float:
    paths = features.paths(params)
    r = np.asarray(outcomes, dtype=float)[:, None] - paths
    return float(np.sum(np.where(features.mask, r * r, 0.0)))


@dataclass(frozen=True)
class BaselineFit:
    family: Family
    params: EwmaParams | EwmlaParams | EwmbaParams
    objective: float

    def to_dict(self) -> dict:
        return {"family": self.family.value, "objective": self.objective, **asdict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineFit":
        fam = Family(d["family"])
        kinds = {Family.EWMA: EwmaParams, Family.EWMLA: EwmlaParams, Family.EWMBA: EwmbaParams}
        fields = kinds[fam].__dataclass_fields__
        params = kinds[fam](**{k: (tuple(v) if isinstance(v, list) else v)
                               for k, v in d.items() if k in fields})
        return cls(fam, params, float(d.get("objective", np.nan)))


def fit_baseline(panels: Sequence[QuestionPanel], family, n_groups: int = 5, seed: int = 0,
                 restarts: int = 10, maxfev: int = 1500) -> BaselineFit:
    """Least-squares fit of ``family`` against the outcomes of ``panels``.

    Nelder-Mead from the default parameters plus ``restarts - 1`` random
    starts; alpha is clamped to [0, 1] and weights pass through a softmax.
    """
    family = Family(family)
    outcomes = np.array([p.outcome for p in panels])
    if any(o is None for o in outcomes) or len(set(outcomes.tolist())) < 2:
        raise ValueError("baseline fitting needs known outcomes with both labels present")
    feats = DayFeatures(panels, n_groups)
    J = n_groups

    def obj(theta):
        return sse(feats, outcomes, _unpack(family, theta, J))

    rng = np.random.default_rng(seed)
    starts = [_default_theta(family, J)] + [_random_theta(family, J, rng) for _ in range(restarts - 1)]
    best_theta, best_val = None, np.inf
    for x0 in starts:
        res = minimize(obj, x0, method="Nelder-Mead",
                       options={"maxfev": maxfev, "xatol": 1e-6, "fatol": 1e-9, "adaptive": True})
        if res.fun < best_val:
            best_theta, best_val = res.x, float(res.fun)
    params = _unpack(family, best_theta, J)
    return BaselineFit(family, params, sse(feats, outcomes, params))


def write_fit(fit: BaselineFit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(fit.to_dict(), fh, indent=2)
        fh.write("\n")


def read_fit(path) -> BaselineFit:
    with open(path, encoding="utf-8") as fh:
        return BaselineFit.from_dict(json.load(fh))


def write_paths(question_ids, paths, path) -> None:
    """Aggregate CSV with the SAC column layout; baselines leave bands blank."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["question_id", "day", "mean_prob", "lo95", "hi95"])
        for q, p in zip(question_ids, paths):
            for t, v in enumerate(p, start=1):
                w.writerow([q, t, fmt(v), "", ""])

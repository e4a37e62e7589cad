"""Scale recovery for the constrained fit, out-of-sample aggregation, and the
fully Bayesian variant that samples the scale alongside the states.

The constrained paths ``X(1)`` are identified only up to a positive scale.
The calibration step picks ``beta`` maximizing a proper score of
``inverse_logit(X(1) / beta)`` against the outcomes, then maps every
parameter back to the unconstrained scale.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .dlm import PanelBatch
from .domain import Dataset, QuestionPanel, fmt, inverse_logit
from .gibbs import (Chain, ConstrainedDraw, GibbsConfig, SamplerError, _draw_bias, _draw_drift,
                    _draw_obs_var, _draw_paths, _draw_state_var, _free_groups, _State, _Streams,
                    _variance_shapes, posterior_mean, run_sampler, sample_posterior, shared_rng)

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
BETA_LO, BETA_HI = 0.05, 20.0
GRID_POINTS = 241
BETA_TOL = 1e-6


class SeparationError(ValueError):
    """All outcomes are identical, so the scale is not identified."""


class Rule(str, enum.Enum):
    BRIER = "brier"
    LOG = "log"

    @classmethod
    def parse(cls, value) -> "Rule":
        if isinstance(value, cls):
            return value
        v = str(value).strip().lower()
        aliases = {"bri": "brier", "brier": "brier", "log": "log", "logarithmic": "log"}
        if v not in aliases:
            raise ValueError(f"unknown scoring rule {value!r}")
        return cls(aliases[v])


def _log_expit(u):
    return np.minimum(u, 0.0) - np.log1p(np.exp(-np.abs(u)))


def score(rule, Z, x):
    """Positively oriented score of logit forecast ``x`` for outcome ``Z``.

    Brier: -(Z - p)^2. Logarithmic: Z log p + (1 - Z) log(1 - p), with p
    clamped to [1e-12, 1 - 1e-12].
    """
    rule = Rule.parse(rule)
    Z = np.asarray(Z, dtype=float)
    x = np.asarray(x, dtype=float)
    if rule is Rule.BRIER:
        out = -(Z - inverse_logit(x)) ** 2
    else:
        lo = math.log(LOG_CLAMP)
        lp = np.maximum(_log_expit(x), lo)
        lq = np.maximum(_log_expit(-x), lo)
        out = Z * lp + (1.0 - Z) * lq
    return float(out) if out.ndim == 0 else out


def _flatten(paths, outcomes):
    xs, zs = [], []
    for p, z in zip(paths, outcomes):
        p = np.asarray(p, dtype=float)
        p = p[np.isfinite(p)]
        xs.append(p)
        zs.append(np.full(p.size, float(z)))
    return np.concatenate(xs), np.concatenate(zs)


def beta_objective(paths, outcomes, rule, beta) -> float:
    """Total score of the paths rescaled by ``1 / beta``."""
    x, z = _flatten(paths, outcomes)
    return float(np.sum(score(rule, z, x / beta)))


def _golden_max(f, lo, hi, tol):
    inv = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv * (b - a)
    d = a + inv * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _grid_scores(rule, z, x, log_betas, block=64):
    out = np.empty(len(log_betas))
    for s in range(0, len(log_betas), block):
        lb = log_betas[s:s + block]
        out[s:s + len(lb)] = np.sum(score(rule, z[None, :], x[None, :] * np.exp(-lb)[:, None]), axis=1)
    return out


def estimate_beta(paths, outcomes, rule=Rule.LOG, lo: float = BETA_LO, hi: float = BETA_HI) -> float:
    """Positive scale maximizing the summed score of ``X(1) / beta``.

    Log-spaced grid over ``[lo, hi]`` refined by golden-section search on
    log(beta) to a relative tolerance of 1e-6.
    """
    outcomes = np.asarray(outcomes)
    if outcomes.size < 2 or np.unique(outcomes).size < 2:
        raise SeparationError("need at least two questions with both outcomes present")
    x, z = _flatten(paths, outcomes)
    rule = Rule.parse(rule)

    def f(log_beta):
        return float(np.sum(score(rule, z, x * math.exp(-log_beta))))

    grid = np.linspace(math.log(lo), math.log(hi), GRID_POINTS)
    vals = _grid_scores(rule, z, x, grid)
    if not np.any(np.isfinite(vals)):
        raise ValueError("calibration objective is not finite anywhere on the grid")
    i = int(np.nanargmax(np.where(np.isfinite(vals), vals, -np.inf)))
    if i == 0 or i == GRID_POINTS - 1:
        log.warning("calibration optimum on the search boundary (beta=%g)", math.exp(grid[i]))
        return float(math.exp(grid[i]))
    best = _golden_max(f, grid[i - 1], grid[i + 1], BETA_TOL * 0.5)
    return float(math.exp(best))


@dataclass(frozen=True)
class CalibrationResult:
    """Unconstrained estimates: X = X(1)/beta, b = b(1) beta, tau2 = tau2(1)/beta^2."""

    beta: float
    paths: tuple[np.ndarray, ...]
    bias: np.ndarray
    state_var: np.ndarray
    obs_var: np.ndarray
    drift: np.ndarray
    question_ids: tuple[str, ...] = ()

    def probs(self, k: int) -> np.ndarray:
        return inverse_logit(self.paths[k])

    def as_draw(self) -> ConstrainedDraw:
        return ConstrainedDraw(self.bias, self.obs_var, self.drift, self.state_var, self.paths,
                               self.question_ids)


def apply_beta(constrained, beta: float) -> CalibrationResult:
    if beta == 0 or not np.isfinite(beta):
        raise ValueError("beta must be finite and non-zero")
    d = constrained.as_draw() if isinstance(constrained, CalibrationResult) else constrained
    return CalibrationResult(
        float(beta), tuple(np.asarray(p) / beta for p in d.paths), np.asarray(d.bias) * beta,
        np.asarray(d.state_var) / (beta * beta), d.obs_var, d.drift, tuple(d.question_ids))


# --- SAC pipeline -----------------------------------------------------------

@dataclass
class SacFit:
    chain: Chain
    mean: ConstrainedDraw
    rule: Rule
    beta: float
    result: CalibrationResult
    draw_betas: np.ndarray
    objective: float
    objective_neg: float
    n_days: int

    @property
    def trained_pairs(self) -> list[tuple[np.ndarray, float]]:
        return [(self.chain.bias[i], float(self.draw_betas[i])) for i in range(len(self.chain))]

    def report(self) -> dict:
        return {"beta": self.beta, "objective": self.objective, "objective_neg_beta": self.objective_neg,
                "rule": self.rule.value, "n_questions": len(self.chain.question_ids), "n_days": self.n_days,
                "bias": self.result.bias.tolist()}


def calibrate_chain(chain: Chain, outcomes, rule=Rule.LOG, per_draw: bool = True):
    """beta from the posterior-mean paths and, optionally, one beta per draw."""
    rule = Rule.parse(rule)
    mean = posterior_mean(chain)
    beta = estimate_beta(mean.paths, outcomes, rule)
    betas = None
    if per_draw:
        betas = np.array([estimate_beta([chain.paths[i, k, :n] for k, n in enumerate(chain.lengths)],
                                        outcomes, rule) for i in range(len(chain))])
    return mean, beta, betas


def fit_sac(dataset: Dataset, config: GibbsConfig | None = None, rule=Rule.LOG,
            chain: Chain | None = None, per_draw: bool = True) -> SacFit:
    """Sampling step then calibration step on a labelled dataset."""
    rule = Rule.parse(rule)
    config = config or GibbsConfig.training()
    if chain is None:
        chain = sample_posterior(dataset, config)
    outcomes = dataset.outcomes
    mean, beta, betas = calibrate_chain(chain, outcomes, rule, per_draw)
    if betas is None:
        betas = np.full(len(chain), beta)
    res = apply_beta(mean, beta)
    obj = beta_objective(mean.paths, outcomes, rule, beta)
    obj_neg = beta_objective(mean.paths, outcomes, rule, -beta)
    return SacFit(chain, mean, rule, beta, res, betas, obj, obj_neg, int(chain.lengths.sum()))


def write_calibration_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_calibration_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# --- out-of-sample aggregation ---------------------------------------------

@dataclass(frozen=True)
class AggregatePath:
    """Per-day aggregate on the probability scale with pointwise 95% bands."""

    question_id: str
    mean_logit: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray

    @property
    def mean_prob(self) -> np.ndarray:
        return inverse_logit(self.mean_logit)


def _pair_schedule(trained: Sequence[tuple[np.ndarray, float]]):
    if len(trained) == 0:
        raise ValueError("trained chain is empty")
    biases = [np.asarray(b, dtype=float) for b, _ in trained]
    betas = np.array([float(bt) for _, bt in trained])
    return biases, betas


def _oos_panels_run(panels: Sequence[QuestionPanel], n_groups, trained, config, keep_full):
    """Sampling step on blinded panels with (b, beta) read from ``trained``.

    Returns per-panel arrays of retained X/beta: full paths when
    ``keep_full`` else the last day only.
    """
    biases, betas = _pair_schedule(trained)
    n = len(biases)
    active = [i for i, p in enumerate(panels) if p.n_forecasts > 0]
    out = [None] * len(panels)
    if active:
        sub = [panels[i] for i in active]
        store: list[list[np.ndarray]] = [[] for _ in sub]
        lengths = [p.horizon for p in sub]

        def on_draw(i, st):
            scaled = st.X / betas[i % n]
            for j, L in enumerate(lengths):
                store[j].append(scaled[j, :L].copy() if keep_full else scaled[j, L - 1])

        run_sampler(sub, n_groups, config.with_(fixed_bias=None), on_draw,
                    bias_schedule=lambda i: biases[i % n])
        for j, i in enumerate(active):
            out[i] = np.array(store[j])
    # No forecasts yet: the prior mean propagated forward stays at init_mean.
    for i, p in enumerate(panels):
        if out[i] is None:
            draws = config.n_retained
            val = config.init_mean
            out[i] = np.full((draws, p.horizon), val) if keep_full else np.full(draws, val)
    return out


def _band(draws, axis=0):
    return (np.mean(draws, axis=axis), np.quantile(draws, 0.025, axis=axis),
            np.quantile(draws, 0.975, axis=axis))


def sac_out_of_sample(panel: QuestionPanel, trained, config: GibbsConfig | None = None,
                      n_groups: int = 5, sequential: bool = True) -> AggregatePath:
    """Aggregate one unlabelled question using trained (b(1), beta) pairs.

    With ``sequential`` the value on day t comes from a run on days 1..t only;
    otherwise from one run on the whole panel. The panel outcome is never read.
    """
    return sac_out_of_sample_many([panel], trained, config, n_groups, sequential)[0]


def sac_out_of_sample_many(panels: Sequence[QuestionPanel], trained, config: GibbsConfig | None = None,
                           n_groups: int = 5, sequential: bool = True) -> list[AggregatePath]:
    config = config or GibbsConfig.aggregation()
    panels = [p.blind() for p in panels]
    if any(p.n_forecasts == 0 and not sequential for p in panels):
        raise SamplerError("cannot aggregate a question without forecasts")
    if not sequential:
        runs = _oos_panels_run(panels, n_groups, trained, config, keep_full=True)
        return [AggregatePath(p.question_id, *_band(r)) for p, r in zip(panels, runs)]
    if any(p.n_forecasts == 0 for p in panels):
        raise SamplerError("cannot aggregate a question without forecasts")
    prefixes, owner = [], []
    for j, p in enumerate(panels):
        for t in range(1, p.horizon + 1):
            prefixes.append(p.truncated(t))
            owner.append(j)
    runs = _oos_panels_run(prefixes, n_groups, trained, config, keep_full=False)
    out = []
    for j, p in enumerate(panels):
        cols = np.stack([r for r, o in zip(runs, owner) if o == j], axis=1)
        out.append(AggregatePath(p.question_id, *_band(cols)))
    return out


def sdlm_trained(n_groups: int = 5) -> list[tuple[np.ndarray, float]]:
    """The (b = 1, beta = 1) pair that turns out-of-sample SAC into the simple DLM."""
    return [(np.ones(n_groups), 1.0)]


AGGREGATE_HEADER = ["question_id", "day", "mean_prob", "lo95", "hi95"]


def write_aggregates(paths: Sequence[AggregatePath], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for ap in paths:
            probs = ap.mean_prob
            lo = inverse_logit(ap.lo95)
            hi = inverse_logit(ap.hi95)
            for t in range(len(probs)):
                w.writerow([ap.question_id, t + 1, fmt(probs[t]), fmt(lo[t]), fmt(hi[t])])


def read_aggregates(path) -> dict[str, dict[str, np.ndarray]]:
    """Aggregate CSV back to ``{question_id: {column: array}}``; blank bands are NaN."""
    out: dict[str, dict[str, list]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            d = out.setdefault(row["question_id"], {"day": [], "mean_prob": [], "lo95": [], "hi95": []})
            d["day"].append(int(row["day"]))
            for c in ("mean_prob", "lo95", "hi95"):
                d[c].append(float(row[c]) if row.get(c) not in (None, "") else np.nan)
    return {q: {c: np.array(v) for c, v in d.items()} for q, d in out.items()}


# --- fully Bayesian variant -------------------------------------------------

@dataclass(frozen=True)
class BsacConfig:
    gibbs: GibbsConfig = field(default_factory=GibbsConfig.training)
    outcome_weight: float = 1.0
    target_accept: float = 0.35
    adapt_every: int = 25
    init_step: float = 2.0
    init_beta_step: float = 0.1


def _draw_x0(st, config, z):
    # Pre-sample state given the first path value; Gaussian in closed form.
    prec = 1.0 / config.init_var + st.drift ** 2 / st.state_var
    mean = (config.init_mean / config.init_var + st.drift * st.X[:, 0] / st.state_var) / prec
    st.x0 = mean + z / np.sqrt(prec)


def _beta_logpost(x, z, log_beta, weight):
    u = x * math.exp(-log_beta)
    ll = np.sum(z * _log_expit(u) + (1.0 - z) * _log_expit(-u))
    # p(1/beta) flat  =>  density of log(beta) proportional to 1/beta
    return weight * float(ll) - log_beta


def bsac_sample(dataset: Dataset, config: BsacConfig | GibbsConfig | None = None) -> Chain:
    """Joint sampler for constrained paths, parameters and the scale beta.

    Hidden states move by single-site random-walk Metropolis (even days, then
    odd days) under the model prior times the outcome likelihood; beta moves
    by random-walk Metropolis on log(beta). Step sizes adapt during burn-in
    toward ``target_accept`` and are frozen afterwards.
    """
    if isinstance(config, GibbsConfig):
        config = BsacConfig(gibbs=config)
    config = config or BsacConfig()
    g = config.gibbs
    panels = dataset.panels
    if not panels:
        raise SamplerError("dataset is empty")
    outcomes = dataset.outcomes.astype(float)
    batch = PanelBatch(panels, dataset.n_groups)
    shapes = _variance_shapes(batch, g)
    bias0, free = _free_groups(batch, g)
    streams = _Streams(g.seed, batch.panels, batch.lengths, batch.Tmax, shapes,
                       n_normals_extra=3, with_uniforms=True)
    shared = shared_rng(g.seed)
    K, Tmax = batch.K, batch.Tmax
    mask = batch.mask()
    st = _State(np.zeros((K, Tmax)), np.zeros(K), bias0.copy(), np.ones(K), np.ones(K), np.ones(K))

    z, tail, gam, u = streams.next()
    _draw_paths(batch, st, z, tail[:, 0], g)
    st.X = np.ascontiguousarray(np.where(mask, st.X, 0.0))

    step = np.full(K, config.init_step)
    beta_step = config.init_beta_step
    log_beta = 0.0
    z_flat = np.broadcast_to(outcomes[:, None], (K, Tmax))[mask]
    sweeps = np.zeros(K)
    accepts = np.zeros(K)
    beta_acc = 0
    beta_tries = 0
    win_acc = np.zeros(K)
    win_beta = 0

    n_ret = g.n_retained
    rec = {"bias": np.empty((n_ret, batch.J)), "obs_var": np.empty((n_ret, K)),
           "drift": np.empty((n_ret, K)), "state_var": np.empty((n_ret, K)),
           "paths": np.full((n_ret, K, Tmax), np.nan), "beta": np.empty(n_ret)}
    j = 0
    for i in range(g.iterations):
        z, tail, gam, u = streams.next()
        sbb, sby = batch.loading_stats(st.bias)
        zz = -z if g.antithetic else z
        logu = np.log(np.where(mask, u, 1.0))
        acc = _kernels.bsac_sweep(st.X, st.x0, batch.lengths, st.drift, st.state_var, st.obs_var,
                                  sbb, sby, outcomes, math.exp(log_beta), config.outcome_weight,
                                  step, zz, logu)
        x0z = -tail[:, 0] if g.antithetic else tail[:, 0]
        _draw_x0(st, g, x0z)
        if free.any():
            _draw_bias(batch, st, free, shared.standard_normal(batch.J))
        _draw_obs_var(batch, st, gam[:, 0])
        _draw_drift(batch, st, tail[:, 1])
        _draw_state_var(batch, st, gam[:, 1])

        x_flat = st.X[mask]
        prop = log_beta + beta_step * shared.standard_normal()
        logu_beta = math.log(shared.random())
        took = False
        # without outcomes the scale has an improper target; keep beta = 1
        if config.outcome_weight > 0:
            cur_lp = _beta_logpost(x_flat, z_flat, log_beta, config.outcome_weight)
            new_lp = _beta_logpost(x_flat, z_flat, prop, config.outcome_weight)
            took = logu_beta < new_lp - cur_lp
        if took:
            log_beta = prop

        frac = acc / batch.lengths
        if i < g.burn_in:
            win_acc += frac
            win_beta += took
            if (i + 1) % config.adapt_every == 0:
                rate = win_acc / config.adapt_every
                step *= np.exp(rate - config.target_accept)
                beta_step *= math.exp(win_beta / config.adapt_every - config.target_accept)
                win_acc[:] = 0.0
                win_beta = 0
        else:
            accepts += frac
            sweeps += 1
            beta_acc += took
            beta_tries += 1
        if g.retained(i):
            rec["bias"][j] = st.bias
            rec["obs_var"][j] = st.obs_var
            rec["drift"][j] = st.drift
            rec["state_var"][j] = st.state_var
            rec["paths"][j] = np.where(mask, st.X, np.nan)
            rec["beta"][j] = math.exp(log_beta)
            j += 1

    state_rate = accepts / np.maximum(sweeps, 1)
    info = {"state_accept_rate": float(np.mean(state_rate)),
            "state_accept_rate_by_question": state_rate.tolist(),
            "beta_accept_rate": beta_acc / max(beta_tries, 1),
            "state_step": step.tolist(), "beta_step": beta_step}
    log.info("BSAC acceptance: states %.3f, beta %.3f", info["state_accept_rate"], info["beta_accept_rate"])
    ref = g.ref_group if g.ref_group is not None else batch.J
    return Chain(tuple(dataset.question_ids), batch.lengths.copy(), ref, rec["bias"], rec["obs_var"],
                 rec["drift"], rec["state_var"], rec["paths"], rec["beta"], info)


def bsac_estimates(chain: Chain) -> CalibrationResult:
    """Posterior means of X(1)/beta and b(1) beta from a BSAC chain."""
    if chain.beta is None:
        raise ValueError("chain carries no beta draws")
    beta = chain.beta[:, None, None]
    paths = np.mean(chain.paths / beta, axis=0)
    return CalibrationResult(
        float(np.mean(chain.beta)), tuple(paths[k, :n] for k, n in enumerate(chain.lengths)),
        np.mean(chain.bias * chain.beta[:, None], axis=0),
        np.mean(chain.state_var / chain.beta[:, None] ** 2, axis=0),
        chain.obs_var.mean(axis=0), chain.drift.mean(axis=0), chain.question_ids)

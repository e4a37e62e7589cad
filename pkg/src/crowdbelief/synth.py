"""Synthetic forecasting panels with a known calibrated crowd belief.

The truth is a unit-rate Brownian path ``W_t`` started at 0. The event occurs
when ``W_T > 0``, and ``X_t = logit(Phi(W_t / sqrt(T - t)))`` is then exactly
the calibrated log-odds of the event given ``W_t``. Experts in group ``j``
report logits ``b_j * X_t + N(0, sigma2)`` on days ``1..T-1``; day ``T``
carries only the outcome.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import log_ndtr

from .domain import Dataset, QuestionPanel, fmt, inverse_logit

BASE_BIAS = (1 / 2, 3 / 4, 1.0, 4 / 3, 2.0)

SIGMA2_GRID = (1 / 2, 1.0, 3 / 2, 2.0, 5 / 2)
BETA_GRID = (1 / 2, 3 / 4, 1.0, 4 / 3, 2.0)
K_GRID = (20, 40, 60, 80, 100)


@dataclass(frozen=True)
class SynthConfig:
    horizon: int = 101
    experts_per_group: int = 10
    obs_var: float = 1.0
    beta: float = 1.0
    n_questions: int = 20
    replicates: int = 1
    seed: int = 0
    forecast_rate: float = 1.0
    base_bias: tuple[float, ...] = BASE_BIAS

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if self.experts_per_group < 1 or self.n_questions < 1 or self.replicates < 1:
            raise ValueError("counts must be >= 1")
        if self.obs_var < 0:
            raise ValueError("obs_var must be >= 0")
        if not 0 < self.forecast_rate <= 1:
            raise ValueError("forecast_rate must lie in (0, 1]")

    @property
    def n_groups(self) -> int:
        return len(self.base_bias)

    @property
    def bias(self) -> np.ndarray:
        return np.asarray(self.base_bias, dtype=float) * self.beta


@dataclass(frozen=True)
class SynthTruth:
    question_id: str
    brownian: np.ndarray
    hidden: np.ndarray
    outcome: int
    bias: np.ndarray = field(repr=False)

    @property
    def probs(self) -> np.ndarray:
        return inverse_logit(self.hidden)


def calibrated_logit(w: np.ndarray, remaining: np.ndarray) -> np.ndarray:
    """logit(Phi(w / sqrt(remaining))) without overflow in the tails."""
    u = w / np.sqrt(remaining)
    return log_ndtr(u) - log_ndtr(-u)


def generate_question(config: SynthConfig, rng: np.random.Generator,
                      question_id: str = "q1") -> tuple[QuestionPanel, SynthTruth]:
    T = config.horizon
    w = np.cumsum(rng.standard_normal(T))
    t = np.arange(1, T)
    hidden = calibrated_logit(w[:-1], (T - t).astype(float))
    outcome = int(w[-1] > 0)

    J, E = config.n_groups, config.experts_per_group
    bias = config.bias
    groups = np.repeat(np.arange(1, J + 1), E)
    experts = np.array([f"g{g}e{e + 1}" for g in range(1, J + 1) for e in range(E)], dtype=object)
    n_exp = J * E
    noise = rng.standard_normal((T - 1, n_exp)) * np.sqrt(config.obs_var)
    y = bias[groups - 1][None, :] * hidden[:, None] + noise
    if config.forecast_rate < 1.0:
        keep = rng.random((T - 1, n_exp)) < config.forecast_rate
    else:
        keep = np.ones((T - 1, n_exp), dtype=bool)
    day_idx, exp_idx = np.nonzero(keep)
    panel = QuestionPanel.from_logits(
        question_id, T, outcome, day_idx + 1, groups[exp_idx], y[day_idx, exp_idx],
        experts[exp_idx])
    return panel, SynthTruth(question_id, w, hidden, outcome, bias)


def generate_dataset(config: SynthConfig, rng: np.random.Generator | int | None = None,
                     prefix: str = "q") -> tuple[Dataset, list[SynthTruth]]:
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(config.seed if rng is None else int(rng))
    panels, truths = [], []
    for k in range(config.n_questions):
        p, tr = generate_question(config, rng, f"{prefix}{k + 1}")
        panels.append(p)
        truths.append(tr)
    return Dataset(tuple(panels), config.n_groups), truths


# --- study harness ----------------------------------------------------------

@dataclass(frozen=True)
class Estimate:
    """Estimated event probabilities on forecast days 1..T-1, per question."""

    probs: Sequence[np.ndarray]
    bias: np.ndarray | None = None


Method = Callable[[Dataset, int], Estimate]

STUDY_HEADER = ["method", "sigma2", "beta", "K", "replicate", "quantity", "loss_type", "value"]


@dataclass(frozen=True)
class LossRow:
    method: str
    sigma2: float
    beta: float
    K: int
    replicate: int
    quantity: str
    loss_type: str
    value: float


def cell_seed(master: int, *keys: int) -> np.random.SeedSequence:
    """Per-cell seed: ``SeedSequence([master, *keys])``."""
    return np.random.SeedSequence([int(master), *[int(k) for k in keys]])


def losses(estimate: Estimate, truths: Sequence[SynthTruth]) -> dict[tuple[str, str], float]:
    diffs = np.concatenate([np.asarray(p, dtype=float) - tr.probs
                            for p, tr in zip(estimate.probs, truths)])
    out = {("hidden", "quadratic"): float(np.mean(diffs ** 2)),
           ("hidden", "absolute"): float(np.mean(np.abs(diffs)))}
    if estimate.bias is not None:
        db = np.asarray(estimate.bias, dtype=float) - truths[0].bias
        out[("bias", "quadratic")] = float(np.mean(db ** 2))
        out[("bias", "absolute")] = float(np.mean(np.abs(db)))
    return out


def sac_method(rule: str = "log", iterations: int = 200, burn_in: int = 100) -> Method:
    """In-sample SAC: posterior-mean paths divided by the fitted scale."""
    def run(ds: Dataset, seed: int) -> Estimate:
        from .calibrate import fit_sac
        from .gibbs import GibbsConfig

        cfg = GibbsConfig(iterations=iterations, burn_in=burn_in, thin=1, seed=seed)
        fit = fit_sac(ds, cfg, rule, per_draw=False)
        probs = [inverse_logit(x[: p.horizon - 1]) for x, p in zip(fit.result.paths, ds.panels)]
        return Estimate(probs, fit.result.bias)
    return run


def baseline_method(family: str = "ewma", restarts: int = 10) -> Method:
    """Baseline fitted to the outcomes of the same data it aggregates."""
    def run(ds: Dataset, seed: int) -> Estimate:
        from .baselines import aggregate_paths, fit_baseline

        fit = fit_baseline(ds.panels, family, ds.n_groups, seed=seed, restarts=restarts)
        paths = aggregate_paths(ds.panels, fit.params, ds.n_groups)
        return Estimate([x[: p.horizon - 1] for x, p in zip(paths, ds.panels)])
    return run


def run_study(methods: Mapping[str, Method], sigma2s=SIGMA2_GRID, betas=BETA_GRID, Ks=K_GRID,
              replicates: int = 40, seed: int = 0, horizon: int = 101,
              experts_per_group: int = 10, progress: Callable[[str], None] | None = None) -> list[LossRow]:
    """Loss table over the (sigma2, beta, K) grid.

    Cell ``(i, j, l)`` replicate ``r`` draws its data from
    ``cell_seed(seed, i, j, l, r)``; methods receive an integer seed spawned
    from the same sequence.
    """
    rows: list[LossRow] = []
    for (i, s2), (j, b), (l, K) in itertools.product(enumerate(sigma2s), enumerate(betas), enumerate(Ks)):
        for r in range(replicates):
            ss = cell_seed(seed, i, j, l, r)
            data_ss, method_ss = ss.spawn(2)
            cfg = SynthConfig(horizon=horizon, experts_per_group=experts_per_group,
                              obs_var=s2, beta=b, n_questions=K)
            ds, truths = generate_dataset(cfg, np.random.default_rng(data_ss))
            mseed = int(method_ss.generate_state(1)[0])
            for name, method in methods.items():
                est = method(ds, mseed)
                for (qty, lt), v in losses(est, truths).items():
                    rows.append(LossRow(name, s2, b, K, r, qty, lt, v))
            if progress is not None:
                progress(f"sigma2={s2} beta={b} K={K} rep={r}")
    return rows


def loss_table(rows: Sequence[LossRow]) -> dict[tuple[str, str, str], float]:
    """Mean loss per (method, quantity, loss_type)."""
    acc: dict[tuple[str, str, str], list[float]] = {}
    for r in rows:
        acc.setdefault((r.method, r.quantity, r.loss_type), []).append(r.value)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def beta_marginals(rows: Sequence[LossRow], quantity="hidden", loss_type="quadratic") -> dict[str, dict[float, float]]:
    """Mean loss per method and beta (the marginal effect of bias scale)."""
    acc: dict[str, dict[float, list[float]]] = {}
    for r in rows:
        if r.quantity == quantity and r.loss_type == loss_type:
            acc.setdefault(r.method, {}).setdefault(r.beta, []).append(r.value)
    return {m: {b: float(np.mean(v)) for b, v in sorted(d.items())} for m, d in acc.items()}


def write_study(rows: Sequence[LossRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STUDY_HEADER)
        for r in rows:
            w.writerow([r.method, fmt(r.sigma2), fmt(r.beta), r.K, r.replicate, r.quantity,
                        r.loss_type, fmt(r.value)])


def read_study(path) -> list[LossRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [LossRow(d["method"], float(d["sigma2"]), float(d["beta"]), int(d["K"]),
                        int(d["replicate"]), d["quantity"], d["loss_type"], float(d["value"]))
                for d in reader]


def write_truth(truths: Sequence[SynthTruth], path) -> None:
    """Truth CSV: ``question_id,day,hidden_logit,prob,brownian``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["question_id", "day", "hidden_logit", "prob", "brownian"])
        for tr in truths:
            for t, (x, bw) in enumerate(zip(tr.hidden, tr.brownian[:-1]), start=1):
                w.writerow([tr.question_id, t, fmt(x), fmt(inverse_logit(x)), fmt(bw)])

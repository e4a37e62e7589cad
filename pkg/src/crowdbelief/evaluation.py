"""Cross-validated Brier scoring, reliability diagnostics and posterior readouts."""

from __future__ import annotations

import csv
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from . import baselines
from .calibrate import (CalibrationResult, Rule, SacFit, bsac_sample, fit_sac,
                        sac_out_of_sample_many, sdlm_trained)
from .domain import Dataset, QuestionPanel, fmt
from .gibbs import Chain, GibbsConfig

log = logging.getLogger(__name__)

SHORT_MAX = 30
LONG_MIN = 60
CLASSES = ("All", "Short", "Medium", "Long")


def length_class(horizon: int) -> str:
    if horizon <= SHORT_MAX:
        return "Short"
    if horizon >= LONG_MIN:
        return "Long"
    return "Medium"


# --- folds ------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[int, ...], ...]
    question_ids: tuple[str, ...]

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def train_test(self, f: int) -> tuple[list[int], list[int]]:
        test = list(self.folds[f])
        held = set(test)
        return [i for i in range(len(self.question_ids)) if i not in held], test

    def day_totals(self, horizons) -> list[int]:
        h = np.asarray(horizons)
        return [int(h[list(f)].sum()) for f in self.folds]


def make_folds(dataset: Dataset, n: int = 10, seed: int = 0) -> FoldPlan:
    """Greedy day-total balancing into ``n`` folds with near-equal counts.

    Questions go by descending horizon to the eligible fold with the smallest
    day total. A fold is eligible while it holds fewer than ceil(K/n)
    questions, and only ``K mod n`` folds may reach that ceiling, so counts
    differ by at most one. The seed shuffles the order among equal horizons.
    """
    K = len(dataset)
    if n < 1 or K < n:
        raise ValueError(f"need at least {n} questions for {n} folds, got {K}")
    sizes = dataset.horizons
    lo, r = divmod(K, n)
    tie = np.random.default_rng(seed).permutation(K)
    visit = sorted(range(K), key=lambda i: (-sizes[i], tie[i]))
    folds: list[list[int]] = [[] for _ in range(n)]
    sums = [0] * n
    full = 0
    for i in visit:
        best = None
        for j in range(n):
            c = len(folds[j])
            if c > lo or (c == lo and full >= r):
                continue
            if best is None or sums[j] < sums[best]:
                best = j
        if len(folds[best]) == lo:
            full += 1
        folds[best].append(i)
        sums[best] += int(sizes[i])
    return FoldPlan(tuple(tuple(sorted(f)) for f in folds), tuple(dataset.question_ids))


# --- methods ----------------------------------------------------------------

Aggregator = Callable[[Sequence[QuestionPanel]], list]


class Method(Protocol):
    """Trains on labelled questions and returns an aggregator for blinded ones.

    The aggregator maps panels to per-day probability arrays (length T_k)
    whose value on day t depends only on forecasts from days <= t.
    """

    def fit(self, train: Dataset, seed: int) -> Aggregator: ...


@dataclass(frozen=True)
class ConstantMethod:
    prob: float = 0.5

    def fit(self, train, seed):
        return lambda panels: [np.full(p.horizon, self.prob) for p in panels]


@dataclass(frozen=True)
class BaselineMethod:
    family: str = "ewma"
    restarts: int = 10

    def fit(self, train, seed):
        res = baselines.fit_baseline(train.panels, self.family, train.n_groups, seed, self.restarts)
        return lambda panels: baselines.aggregate_paths(panels, res.params, train.n_groups)


@dataclass(frozen=True)
class SacMethod:
    rule: str = "log"
    training: GibbsConfig = field(default_factory=GibbsConfig.training)
    aggregation: GibbsConfig = field(default_factory=GibbsConfig.aggregation)

    def fit(self, train, seed):
        sac = fit_sac(train, self.training.with_(seed=seed), Rule.parse(self.rule))
        return _oos(sac.trained_pairs, self.aggregation.with_(seed=seed), train.n_groups)


@dataclass(frozen=True)
class BsacMethod:
    training: GibbsConfig = field(default_factory=GibbsConfig.training)
    aggregation: GibbsConfig = field(default_factory=GibbsConfig.aggregation)

    def fit(self, train, seed):
        chain = bsac_sample(train, self.training.with_(seed=seed))
        pairs = [(chain.bias[i], float(chain.beta[i])) for i in range(len(chain))]
        return _oos(pairs, self.aggregation.with_(seed=seed), train.n_groups)


@dataclass(frozen=True)
class SdlmMethod:
    aggregation: GibbsConfig = field(default_factory=GibbsConfig.aggregation)

    def fit(self, train, seed):
        return _oos(sdlm_trained(train.n_groups), self.aggregation.with_(seed=seed), train.n_groups)


def _oos(pairs, config, n_groups) -> Aggregator:
    def agg(panels):
        return [a.mean_prob for a in sac_out_of_sample_many(panels, pairs, config, n_groups, True)]
    return agg


# --- cross-validation -------------------------------------------------------

@dataclass
class EvaluationReport:
    """Brier scores keyed by method, each a list of (question_id, day, score)."""

    horizons: dict[str, int]
    scores: dict[str, list[tuple[str, int, float]]] = field(default_factory=dict)
    forecasts: dict[str, list[tuple[str, int, float]]] = field(default_factory=dict)
    failures: list[tuple[str, int, str]] = field(default_factory=list)

    @property
    def methods(self) -> list[str]:
        return list(self.scores)

    def question_scores(self, method: str, cls: str = "All") -> dict[str, np.ndarray]:
        acc: dict[str, list[float]] = {}
        for q, _, s in self.scores[method]:
            if cls == "All" or length_class(self.horizons[q]) == cls:
                acc.setdefault(q, []).append(s)
        return {q: np.array(v) for q, v in acc.items()}

    def forecast_outcome_pairs(self, method: str, outcomes: Mapping[str, int]) -> tuple[np.ndarray, np.ndarray]:
        rows = self.forecasts[method]
        return (np.array([p for _, _, p in rows]),
                np.array([outcomes[q] for q, _, _ in rows], dtype=float))


class AccessGuardError(RuntimeError):
    pass


def run_cv(dataset: Dataset, methods: Mapping[str, Method], plan: FoldPlan | None = None,
           seed: int = 0, threads: int = 1) -> EvaluationReport:
    """Train on all but one fold, aggregate the held-out questions day by day.

    Held-out panels are passed blinded, so their outcomes are not available
    to the method. A fold whose training or aggregation raises is skipped and
    recorded in ``report.failures``.
    """
    outcomes = dataset.outcomes
    plan = plan or make_folds(dataset, 10, seed)
    if tuple(plan.question_ids) != tuple(dataset.question_ids):
        raise ValueError("fold plan was built for a different dataset")
    horizons = {p.question_id: p.horizon for p in dataset.panels}
    fold_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(plan.n_folds)]

    def one(name, method, f):
        train_idx, test_idx = plan.train_test(f)
        train = dataset.subset(train_idx)
        test = [dataset.panels[i].blind() for i in test_idx]
        if any(p.outcome is not None for p in test):
            raise AccessGuardError("held-out outcome leaked into aggregation input")
        try:
            agg = method.fit(train, fold_seeds[f])(test)
        except Exception as exc:  # noqa: BLE001 - failures are part of the report
            log.warning("method %s failed on fold %d: %s", name, f, exc)
            return None, (name, f, f"{type(exc).__name__}: {exc}")
        rows, fc = [], []
        for i, p, probs in zip(test_idx, test, agg):
            probs = np.asarray(probs, dtype=float)
            if probs.shape != (p.horizon,):
                return None, (name, f, f"aggregate for {p.question_id} has shape {probs.shape}")
            z = float(outcomes[i])
            for t in range(2, p.horizon + 1):
                rows.append((p.question_id, t, float((probs[t - 1] - z) ** 2)))
                fc.append((p.question_id, t, float(probs[t - 1])))
        return (rows, fc), None

    jobs = [(name, m, f) for name, m in methods.items() for f in range(plan.n_folds)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(lambda job: one(*job), jobs))
    else:
        results = [one(*job) for job in jobs]

    report = EvaluationReport(horizons, {name: [] for name in methods}, {name: [] for name in methods})
    order = {q: i for i, q in enumerate(dataset.question_ids)}
    for (name, _, _), (out, fail) in zip(jobs, results):
        if fail is not None:
            report.failures.append(fail)
        else:
            report.scores[name].extend(out[0])
            report.forecasts[name].extend(out[1])
    for name in methods:
        report.scores[name].sort(key=lambda r: (order[r[0]], r[1]))
        report.forecasts[name].sort(key=lambda r: (order[r[0]], r[1]))
    return report


def _se(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(np.std(values, ddof=1)) if values.size > 1 else float("nan")


def summarize(report: EvaluationReport, method: str, mode: str = "by_day",
              cls: str = "All") -> tuple[float, float]:
    """(mean, standard error) of the Brier scores of ``method``.

    ``by_day`` weights every scored day equally; ``by_problem`` averages the
    per-question means. The SE is the sample standard deviation of the
    averaged values.
    """
    if cls not in CLASSES:
        raise ValueError(f"unknown length class {cls!r}")
    per_q = report.question_scores(method, cls)
    if not per_q:
        raise ValueError(f"no scores for method {method!r} in class {cls}")
    if mode == "by_day":
        vals = np.concatenate(list(per_q.values()))
    elif mode == "by_problem":
        vals = np.array([v.mean() for v in per_q.values()])
    else:
        raise ValueError(f"unknown summary mode {mode!r}")
    return float(vals.mean()), _se(vals)


@dataclass(frozen=True)
class SummaryRow:
    method: str
    mode: str
    cls: str
    mean: float
    se: float


def summary_rows(report: EvaluationReport) -> list[SummaryRow]:
    rows = []
    for m in report.methods:
        for mode in ("by_day", "by_problem"):
            for cls in CLASSES:
                if report.question_scores(m, cls):
                    rows.append(SummaryRow(m, mode, cls, *summarize(report, m, mode, cls)))
    return rows


def format_summary(rows: Sequence[SummaryRow]) -> str:
    """Plain-text table: one line per (method, mode), classes as columns."""
    cells: dict[tuple[str, str], dict[str, SummaryRow]] = {}
    for r in rows:
        cells.setdefault((r.method, r.mode), {})[r.cls] = r
    width = max([len(m) for m, _ in cells] + [6])
    lines = [f"{'method':<{width}}  {'mode':<10}  " + "  ".join(f"{c:>17}" for c in CLASSES)]
    for (m, mode), by_cls in cells.items():
        parts = []
        for c in CLASSES:
            r = by_cls.get(c)
            parts.append(f"{'-':>17}" if r is None else f"{r.mean:8.4f} ({r.se:6.4f})")
        lines.append(f"{m:<{width}}  {mode:<10}  " + "  ".join(parts))
    return "\n".join(lines)


# --- reliability ------------------------------------------------------------

@dataclass(frozen=True)
class ReliabilityTable:
    center: np.ndarray
    freq: np.ndarray
    count: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __len__(self):
        return len(self.center)

    @property
    def outside(self) -> np.ndarray:
        return (self.freq < self.lo) | (self.freq > self.hi)

    @property
    def n_outside(self) -> int:
        return int(self.outside.sum())

    def underconfidence_signature(self) -> bool:
        """Out-of-band bins lie below the band under 0.5 and above it over 0.5."""
        out = self.outside
        if not out.any():
            return False
        below = self.freq < self.lo
        above = self.freq > self.hi
        return bool(np.all(np.where(self.center[out] < 0.5, below[out], above[out])))


def reliability(forecasts, outcomes, bins: int = 10, n_boot: int = 10000, level: float = 0.95,
                seed: int = 0) -> ReliabilityTable:
    """Equal-count reliability bins with Bonferroni consistency bands.

    Under the null each outcome is Bernoulli(forecast); the band for a bin is
    the pair of ``(1 - level) / (2 * bins)`` tail quantiles of the resampled
    bin frequency.
    """
    p = np.asarray(forecasts, dtype=float).ravel()
    z = np.asarray(outcomes, dtype=float).ravel()
    if p.size == 0:
        raise ValueError("no forecasts")
    if p.size != z.size:
        raise ValueError("forecasts and outcomes differ in length")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("forecasts must lie in [0, 1]")
    n_bins = min(bins, p.size)
    order = np.argsort(p, kind="stable")
    groups = [g for g in np.array_split(order, n_bins) if g.size]
    rng = np.random.default_rng(seed)
    tail = (1.0 - level) / (2.0 * len(groups))
    center, freq, count, lo, hi = [], [], [], [], []
    for g in groups:
        pb = p[g]
        sims = np.empty(n_boot)
        step = max(1, 2_000_000 // pb.size)
        for s in range(0, n_boot, step):
            e = min(n_boot, s + step)
            sims[s:e] = (rng.random((e - s, pb.size)) < pb).mean(axis=1)
        center.append(pb.mean())
        freq.append(z[g].mean())
        count.append(g.size)
        lo.append(np.quantile(sims, tail))
        hi.append(np.quantile(sims, 1.0 - tail))
    return ReliabilityTable(np.array(center), np.array(freq), np.array(count, dtype=int),
                            np.array(lo), np.array(hi))


# --- posterior readouts -----------------------------------------------------

QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)


@dataclass(frozen=True)
class OrderingReport:
    probabilities: dict[str, float]
    quantiles: np.ndarray  # (J, len(QUANTILES))


_CHAIN_RE = re.compile(r"^b(\d+)((?:\s*[<>]\s*b\d+)+)$")


def _event_mask(draws: np.ndarray, event: str) -> np.ndarray:
    s = event.replace(" ", "")
    m = _CHAIN_RE.match(s)
    if not m:
        raise ValueError(f"cannot parse ordering {event!r}; use forms like 'b1<b2<b5'")
    idx = [int(v) for v in re.findall(r"b(\d+)", s)]
    ops = re.findall(r"[<>]", s)
    if max(idx) > draws.shape[1] or min(idx) < 1:
        raise ValueError(f"group index out of range in {event!r}")
    ok = np.ones(draws.shape[0], dtype=bool)
    for (a, b), op in zip(zip(idx, idx[1:]), ops):
        ok &= draws[:, a - 1] < draws[:, b - 1] if op == "<" else draws[:, a - 1] > draws[:, b - 1]
    return ok


def bias_ordering(chain, events: Sequence[str] = ()) -> OrderingReport:
    """Posterior probabilities of bias orderings plus per-group quantiles.

    ``chain`` is a Chain (scaled by its beta draws when present) or an array
    of bias draws with shape (n, J). Default events: each group largest,
    strictly increasing, strictly decreasing, and all biases below 1.
    """
    if isinstance(chain, Chain):
        draws = chain.bias * (chain.beta[:, None] if chain.beta is not None else 1.0)
    else:
        draws = np.atleast_2d(np.asarray(chain, dtype=float))
    if draws.shape[0] == 0:
        raise ValueError("empty chain")
    J = draws.shape[1]
    probs = {}
    top = np.argmax(draws, axis=1)
    for j in range(J):
        probs[f"b{j + 1} largest"] = float(np.mean(top == j))
    d = np.diff(draws, axis=1)
    probs["strictly increasing"] = float(np.mean(np.all(d > 0, axis=1)))
    probs["strictly decreasing"] = float(np.mean(np.all(d < 0, axis=1)))
    probs["all below 1"] = float(np.mean(np.all(draws < 1.0, axis=1)))
    for e in events:
        probs[e] = float(np.mean(_event_mask(draws, e)))
    return OrderingReport(probs, np.quantile(draws, QUANTILES, axis=0).T)


@dataclass(frozen=True)
class DifficultyRecord:
    """Fitted per-question parameters with their readings.

    disagreement: obs_var, spread of experts around the consensus;
    volatility: state_var, day-to-day movement of the crowd belief;
    drift: multiplicative pull of the belief between days.
    """

    question_id: str
    obs_var: float
    state_var: float
    drift: float

    @property
    def disagreement(self) -> float:
        return self.obs_var

    @property
    def volatility(self) -> float:
        return self.state_var


def question_difficulty(fit: SacFit | CalibrationResult) -> list[DifficultyRecord]:
    res = fit.result if isinstance(fit, SacFit) else fit
    return [DifficultyRecord(q, float(res.obs_var[k]), float(res.state_var[k]), float(res.drift[k]))
            for k, q in enumerate(res.question_ids)]


# --- CSV exports ------------------------------------------------------------

SCORE_HEADER = ["method", "question_id", "day", "brier"]
SUMMARY_HEADER = ["method", "mode", "class", "mean", "se"]
RELIABILITY_HEADER = ["bin", "center", "freq", "count", "lo", "hi"]


def _writer(path, header):
    fh = open(path, "w", newline="", encoding="utf-8")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    return fh, w


def write_scores(report: EvaluationReport, path) -> None:
    fh, w = _writer(path, SCORE_HEADER)
    with fh:
        for m, rows in report.scores.items():
            for q, t, s in rows:
                w.writerow([m, q, t, fmt(s)])


def read_scores(path) -> dict[str, list[tuple[str, int, float]]]:
    out: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            out.setdefault(r["method"], []).append((r["question_id"], int(r["day"]), float(r["brier"])))
    return out


def write_summary(rows: Sequence[SummaryRow], path) -> None:
    fh, w = _writer(path, SUMMARY_HEADER)
    with fh:
        for r in rows:
            w.writerow([r.method, r.mode, r.cls, fmt(r.mean), fmt(r.se)])


def read_summary(path) -> list[SummaryRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [SummaryRow(r["method"], r["mode"], r["class"], float(r["mean"]), float(r["se"]))
                for r in csv.DictReader(fh)]


def write_reliability(table: ReliabilityTable, path) -> None:
    fh, w = _writer(path, RELIABILITY_HEADER)
    with fh:
        for b in range(len(table)):
            w.writerow([b + 1, fmt(table.center[b]), fmt(table.freq[b]), int(table.count[b]),
                        fmt(table.lo[b]), fmt(table.hi[b])])


def read_reliability(path) -> ReliabilityTable:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
    return ReliabilityTable(col("center"), col("freq"), col("count").astype(int), col("lo"), col("hi"))


def method_from_name(name: str, training: GibbsConfig | None = None,
                     aggregation: GibbsConfig | None = None) -> Method:
    """Resolve a method label such as ``sac-log``, ``bsac``, ``sdlm``, ``ewma`` or ``const``."""
    key = name.strip().lower()
    training = training or GibbsConfig.training()
    aggregation = aggregation or GibbsConfig.aggregation()
    if key in ("sac-log", "sac-brier", "sac-bri"):
        return SacMethod(key.split("-", 1)[1], training, aggregation)
    if key == "bsac":
        return BsacMethod(training, aggregation)
    if key == "sdlm":
        return SdlmMethod(aggregation)
    if key in ("ewma", "ewmla", "ewmba"):
        return BaselineMethod(key)
    if key.startswith("const"):
        tail = key[5:].lstrip("-=:")
        return ConstantMethod(float(tail) if tail else 0.5)
    raise ValueError(f"unknown method {name!r}")


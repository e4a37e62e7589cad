"""Forecast data model, probability transforms, censoring and balancing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_LO = 0.01
DEFAULT_HI = 0.99


class DataError(ValueError):
    """Malformed or inconsistent forecast data."""


# --- transforms -------------------------------------------------------------

def censor(p, lo: float = DEFAULT_LO, hi: float = DEFAULT_HI):
    """Clamp raw probabilities from [0, 1] into [lo, hi]."""
    if not (0.0 < lo < hi < 1.0):
        raise ValueError(f"censor bounds must satisfy 0 < lo < hi < 1, got ({lo}, {hi})")
    arr = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    out = np.minimum(np.maximum(arr, lo), hi)
    return float(out) if out.ndim == 0 else out


def logit(p):
    """log(p / (1 - p)) for p strictly inside (0, 1)."""
    arr = np.asarray(p, dtype=float)
    if np.any(~(arr > 0.0)) or np.any(~(arr < 1.0)):
        raise ValueError("logit requires 0 < p < 1; censor the input first")
    out = np.log(arr) - np.log1p(-arr)
    return float(out) if out.ndim == 0 else out


def inverse_logit(x):
    """Numerically stable logistic function.

    Results are clamped to the open unit interval so that ``logit`` can always
    be applied to the output.
    """
    arr = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(arr))
    out = np.where(arr >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    tiny = np.finfo(float).tiny
    out = np.clip(out, tiny, np.nextafter(1.0, 0.0))
    return float(out) if out.ndim == 0 else out


# --- data model -------------------------------------------------------------

@dataclass(frozen=True)
class Forecast:
    expert_id: str
    day: int
    question_id: str
    prob: float
    group: int


@dataclass(frozen=True, eq=False)
class QuestionPanel:
    """All forecasts for one question, stored as day-sorted flat arrays.

    ``days`` and ``groups`` are 1-based. ``logits`` are finite; ``probs`` hold
    the matching (censored) probabilities.
    """

    question_id: str
    horizon: int
    outcome: int | None
    days: np.ndarray
    groups: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    experts: np.ndarray = field(default=None)

    def __post_init__(self):
        days = np.asarray(self.days, dtype=np.int64)
        order = np.argsort(days, kind="stable")
        object.__setattr__(self, "days", days[order])
        object.__setattr__(self, "groups", np.asarray(self.groups, dtype=np.int64)[order])
        object.__setattr__(self, "logits", np.asarray(self.logits, dtype=float)[order])
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float)[order])
        experts = self.experts
        if experts is None:
            experts = np.array([""] * len(days), dtype=object)
        object.__setattr__(self, "experts", np.asarray(experts, dtype=object)[order])
        for arr in (self.days, self.groups, self.logits, self.probs, self.experts):
            arr.setflags(write=False)

        if self.horizon < 1:
            raise DataError(f"question {self.question_id}: horizon must be >= 1")
        if self.outcome not in (None, 0, 1):
            raise DataError(f"question {self.question_id}: outcome must be 0, 1 or unknown")
        n = len(self.days)
        if not (len(self.groups) == len(self.logits) == len(self.probs) == len(self.experts) == n):
            raise DataError(f"question {self.question_id}: column lengths differ")
        if n:
            if self.days[0] < 1 or self.days[-1] > self.horizon:
                raise DataError(f"question {self.question_id}: forecast day outside 1..{self.horizon}")
            if self.groups.min() < 1:
                raise DataError(f"question {self.question_id}: group index must be >= 1")
            if not np.all(np.isfinite(self.logits)):
                raise DataError(f"question {self.question_id}: non-finite logit (censor first)")

    @classmethod
    def from_logits(cls, question_id, horizon, outcome, days, groups, logits, experts=None):
        logits = np.asarray(logits, dtype=float)
        return cls(question_id, int(horizon), outcome, days, groups, logits,
                   inverse_logit(logits) if logits.size else np.zeros(0), experts)

    @classmethod
    def from_probs(cls, question_id, horizon, outcome, days, groups, probs, experts=None,
                   lo=DEFAULT_LO, hi=DEFAULT_HI):
        probs = np.asarray(probs, dtype=float)
        p = np.atleast_1d(censor(probs, lo, hi)) if probs.size else np.zeros(0)
        return cls(question_id, int(horizon), outcome, days, groups,
                   logit(p) if p.size else np.zeros(0), p, experts)

    @property
    def n_forecasts(self) -> int:
        return int(len(self.days))

    @property
    def counts(self) -> np.ndarray:
        """N_t for t = 1..horizon."""
        return np.bincount(self.days - 1, minlength=self.horizon)[: self.horizon]

    @property
    def n_experts(self) -> int:
        return len(set(self.experts.tolist())) if self.n_forecasts else 0

    @property
    def slices(self) -> list[list[tuple[float, int]]]:
        out: list[list[tuple[float, int]]] = [[] for _ in range(self.horizon)]
        for d, y, g in zip(self.days, self.logits, self.groups):
            out[d - 1].append((float(y), int(g)))
        return out

    def mirrored(self) -> "QuestionPanel":
        """Swap event and non-event: p -> 1 - p, Z -> 1 - Z."""
        return replace(self, logits=-self.logits, probs=1.0 - self.probs,
                       outcome=None if self.outcome is None else 1 - self.outcome)

    def truncated(self, t: int) -> "QuestionPanel":
        """The first ``t`` days only, outcome withheld."""
        if not 1 <= t <= self.horizon:
            raise ValueError(f"prefix length {t} outside 1..{self.horizon}")
        keep = self.days <= t
        return QuestionPanel(self.question_id, t, None, self.days[keep], self.groups[keep],
                             self.logits[keep], self.probs[keep], self.experts[keep])

    def blind(self) -> "QuestionPanel":
        return replace(self, outcome=None)


@dataclass(frozen=True)
class Dataset:
    panels: tuple[QuestionPanel, ...]
    n_groups: int = 5

    def __post_init__(self):
        object.__setattr__(self, "panels", tuple(self.panels))
        ids = [p.question_id for p in self.panels]
        if len(set(ids)) != len(ids):
            raise DataError("question ids must be unique")
        for p in self.panels:
            if p.n_forecasts and p.groups.max() > self.n_groups:
                raise DataError(f"question {p.question_id}: group exceeds J={self.n_groups}")

    def __len__(self):
        return len(self.panels)

    def __iter__(self):
        return iter(self.panels)

    def __getitem__(self, i):
        return self.panels[i]

    @property
    def question_ids(self) -> list[str]:
        return [p.question_id for p in self.panels]

    @property
    def horizons(self) -> np.ndarray:
        return np.array([p.horizon for p in self.panels], dtype=np.int64)

    @property
    def outcomes(self) -> np.ndarray:
        if any(p.outcome is None for p in self.panels):
            raise DataError("dataset has unknown outcomes")
        return np.array([p.outcome for p in self.panels], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.panels[i] for i in indices), self.n_groups)

    def mirrored(self) -> "Dataset":
        return Dataset(tuple(p.mirrored() for p in self.panels), self.n_groups)


# --- balancing --------------------------------------------------------------

@dataclass(frozen=True)
class BalancePartition:
    S0: tuple[int, ...]
    S1: tuple[int, ...]
    flipped: tuple[bool, ...]


def greedy_partition(sizes: Sequence[int], n_parts: int, order: Sequence[int] | None = None,
                     cap: int | None = None) -> list[list[int]]:
    """Greedy number partitioning.

    Items are visited by descending size (ties in ``order``, default index
    order) and each goes to the non-full part with the smallest running sum,
    ties to the lowest part index.
    """
    sizes = list(sizes)
    if order is None:
        order = range(len(sizes))
    rank = {idx: r for r, idx in enumerate(order)}
    visit = sorted(range(len(sizes)), key=lambda i: (-sizes[i], rank[i]))
    parts: list[list[int]] = [[] for _ in range(n_parts)]
    sums = [0] * n_parts
    for i in visit:
        best = None
        for j in range(n_parts):
            if cap is not None and len(parts[j]) >= cap:
                continue
            if best is None or sums[j] < sums[best]:
                best = j
        parts[best].append(i)
        sums[best] += sizes[i]
    return parts


def balance(dataset: Dataset) -> tuple[Dataset, BalancePartition]:
    """Split questions into two halves of near-equal total days and relabel.

    Questions in side ``x`` whose outcome is ``1 - x`` are mirrored so every
    question in side ``x`` has outcome ``x``. Side sizes differ by at most one.
    """
    if any(p.outcome is None for p in dataset.panels):
        raise DataError("balancing requires every outcome to be known")
    K = len(dataset)
    s0, s1 = greedy_partition(dataset.horizons.tolist(), 2, cap=math.ceil(K / 2) if K else None)
    side = np.zeros(K, dtype=int)
    side[s1] = 1
    panels = []
    flipped = []
    for k, p in enumerate(dataset.panels):
        flip = p.outcome != side[k]
        flipped.append(bool(flip))
        panels.append(p.mirrored() if flip else p)
    part = BalancePartition(tuple(sorted(s0)), tuple(sorted(s1)), tuple(flipped))
    return Dataset(tuple(panels), dataset.n_groups), part


# --- CSV I/O ----------------------------------------------------------------

FORECAST_HEADER = ["question_id", "expert_id", "day", "prob", "expertise"]
OUTCOME_HEADER = ["question_id", "horizon", "outcome"]


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _check_header(path, reader, expected):
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != expected:
        raise DataError(f"{path}: expected header {','.join(expected)}")


def read_forecasts(path) -> list[Forecast]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        _check_header(path, reader, FORECAST_HEADER)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                qid, eid, day, prob, grp = (c.strip() for c in row)
                out.append(Forecast(eid, int(day), qid, float(prob), int(grp)))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def read_outcomes(path) -> dict[str, tuple[int, int | None]]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        _check_header(path, reader, OUTCOME_HEADER)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                qid, horizon, outcome = (c.strip() for c in row)
                z = None if outcome in ("", "NA", "na") else int(outcome)
                if z not in (None, 0, 1):
                    raise ValueError(f"outcome must be 0 or 1, got {outcome}")
                out[qid] = (int(horizon), z)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def build_dataset(forecasts: Iterable[Forecast], outcomes: dict[str, tuple[int, int | None]],
                  n_groups: int = 5, lo: float = DEFAULT_LO, hi: float = DEFAULT_HI) -> Dataset:
    """Group forecasts by question (outcome-file order) and censor them."""
    by_q: dict[str, list[Forecast]] = {q: [] for q in outcomes}
    for f in forecasts:
        if f.question_id not in by_q:
            raise DataError(f"forecast for unknown question {f.question_id}")
        if not 1 <= f.group <= n_groups:
            raise DataError(f"question {f.question_id}: expertise {f.group} outside 1..{n_groups}")
        by_q[f.question_id].append(f)
    panels = []
    for qid, (horizon, z) in outcomes.items():
        fs = by_q[qid]
        panels.append(QuestionPanel.from_probs(
            qid, horizon, z,
            [f.day for f in fs], [f.group for f in fs], [f.prob for f in fs],
            [f.expert_id for f in fs], lo=lo, hi=hi))
    return Dataset(tuple(panels), n_groups)


def load_dataset(forecast_path, outcome_path, n_groups=5, lo=DEFAULT_LO, hi=DEFAULT_HI) -> Dataset:
    return build_dataset(read_forecasts(forecast_path), read_outcomes(outcome_path), n_groups, lo, hi)


def write_forecasts(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FORECAST_HEADER)
        for p in dataset.panels:
            for e, d, pr, g in zip(p.experts, p.days, p.probs, p.groups):
                w.writerow([p.question_id, e, int(d), fmt(pr), int(g)])


def write_outcomes(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OUTCOME_HEADER)
        for p in dataset.panels:
            w.writerow([p.question_id, p.horizon, "" if p.outcome is None else p.outcome])


def ensure_parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path

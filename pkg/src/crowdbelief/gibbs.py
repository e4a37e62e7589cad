"""Gibbs sampler for the constrained model (reference group bias pinned to 1).

One iteration draws, in order: every hidden path by forward filtering and
backward sampling, the free group biases, the per-question observation
variances, drifts and state variances. All conditionals are conjugate.

Randomness is split into named substreams so results do not depend on how
questions are batched: question ``k`` draws from
``SeedSequence([seed, crc32(question_id), horizon])`` and the shared bias
update from ``SeedSequence([seed, SHARED_KEY])``.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Sequence

import numpy as np

from . import _kernels
from .dlm import PanelBatch
from .domain import Dataset, QuestionPanel


class SamplerError(ValueError):
    """The data cannot support a requested conditional draw."""


SHARED_KEY = 0x5EED
CHUNK = 32


@dataclass(frozen=True)
class GibbsConfig:
    iterations: int = 3000
    burn_in: int = 500
    thin: int = 5
    seed: int = 0
    ref_group: int | None = None
    prior_exponent_obs: float = 1.0
    prior_exponent_state: float = 1.0
    fixed_bias: tuple[float, ...] | None = None
    init_mean: float = 0.0
    init_var: float = 1.0
    antithetic: bool = False

    def __post_init__(self):
        if self.iterations < 1 or not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")

    @classmethod
    def training(cls, **kw) -> "GibbsConfig":
        return cls(**{"iterations": 3000, "burn_in": 500, "thin": 5, **kw})

    @classmethod
    def aggregation(cls, **kw) -> "GibbsConfig":
        # Jeffreys exponents keep the variance conditionals proper on the
        # two- and three-day prefixes scored out of sample.
        defaults = {"iterations": 500, "burn_in": 200, "thin": 2,
                    "prior_exponent_obs": -1.0, "prior_exponent_state": -1.0}
        return cls(**{**defaults, **kw})

    @classmethod
    def sdlm(cls, n_groups: int = 5, **kw) -> "GibbsConfig":
        defaults = {"iterations": 500, "burn_in": 200, "thin": 2,
                    "prior_exponent_obs": -1.0, "prior_exponent_state": -1.0}
        return cls(**{**defaults, **kw, "fixed_bias": (1.0,) * n_groups})

    @property
    def n_retained(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))

    def retained(self, i: int) -> bool:
        return i >= self.burn_in and (i - self.burn_in) % self.thin == 0

    def with_(self, **kw) -> "GibbsConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class ConstrainedDraw:
    """Parameters and paths of one draw, all on the constrained scale."""

    bias: np.ndarray
    obs_var: np.ndarray
    drift: np.ndarray
    state_var: np.ndarray
    paths: tuple[np.ndarray, ...]
    question_ids: tuple[str, ...] = ()
    beta: float | None = None

    def path(self, question_id: str) -> np.ndarray:
        return self.paths[self.question_ids.index(question_id)]


@dataclass
class Chain(Sequence[ConstrainedDraw]):
    """Retained draws stored as stacked arrays; indexing yields draws.

    ``paths`` is ``(n, K, Tmax)`` padded with NaN beyond each horizon.
    """

    question_ids: tuple[str, ...]
    lengths: np.ndarray
    ref_group: int
    bias: np.ndarray
    obs_var: np.ndarray
    drift: np.ndarray
    state_var: np.ndarray
    paths: np.ndarray
    beta: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __len__(self):
        return self.bias.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return ConstrainedDraw(
            self.bias[i].copy(), self.obs_var[i].copy(), self.drift[i].copy(),
            self.state_var[i].copy(),
            tuple(self.paths[i, k, :n].copy() for k, n in enumerate(self.lengths)),
            self.question_ids, None if self.beta is None else float(self.beta[i]))

    def __iter__(self) -> Iterator[ConstrainedDraw]:
        for i in range(len(self)):
            yield self[i]

    @property
    def n_groups(self) -> int:
        return self.bias.shape[1]

    def path_array(self, k: int) -> np.ndarray:
        """All retained draws of question ``k``'s path, shape (n, T_k)."""
        return self.paths[:, k, : self.lengths[k]]


# --- random substreams ------------------------------------------------------

def question_rng(seed: int, question_id: str, horizon: int) -> np.random.Generator:
    key = zlib.crc32(str(question_id).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, int(horizon)]))


def shared_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), SHARED_KEY]))


class _Streams:
    """Per-question random blocks, generated CHUNK iterations at a time."""

    def __init__(self, seed, panels: Sequence[QuestionPanel], lengths, Tmax, gamma_shapes,
                 n_normals_extra=2, with_uniforms=False):
        self.rngs = [question_rng(seed, p.question_id, p.horizon) for p in panels]
        self.lengths = lengths
        self.Tmax = Tmax
        self.shapes = gamma_shapes  # (K, 2)
        self.extra = n_normals_extra
        self.with_uniforms = with_uniforms
        self._pos = CHUNK

    def _refill(self):
        K = len(self.rngs)
        self.z = np.zeros((CHUNK, K, self.Tmax))
        self.tail = np.zeros((CHUNK, K, self.extra))
        self.gam = np.ones((CHUNK, K, 2))
        if self.with_uniforms:
            self.u = np.zeros((CHUNK, K, self.Tmax))
        for k, rng in enumerate(self.rngs):
            n = int(self.lengths[k])
            block = rng.standard_normal((CHUNK, n + self.extra))
            self.z[:, k, :n] = block[:, :n]
            self.tail[:, k, :] = block[:, n:]
            self.gam[:, k, :] = rng.standard_gamma(self.shapes[k], size=(CHUNK, 2))
            if self.with_uniforms:
                self.u[:, k, :n] = rng.random((CHUNK, n))
        self._pos = 0

    def next(self):
        if self._pos >= CHUNK:
            self._refill()
        i = self._pos
        self._pos += 1
        u = self.u[i] if self.with_uniforms else None
        return self.z[i], self.tail[i], self.gam[i], u


# --- conditional updates ----------------------------------------------------

@dataclass
class _State:
    X: np.ndarray
    x0: np.ndarray
    bias: np.ndarray
    obs_var: np.ndarray
    drift: np.ndarray
    state_var: np.ndarray


def _variance_shapes(batch: PanelBatch, config: GibbsConfig) -> np.ndarray:
    """Inverse-gamma shapes for (obs_var, state_var) per question."""
    a_obs = batch.n_per_question / 2.0 - config.prior_exponent_obs - 1.0
    a_state = batch.lengths / 2.0 - config.prior_exponent_state - 1.0
    for k, p in enumerate(batch.panels):
        if a_obs[k] <= 0:
            raise SamplerError(
                f"question {p.question_id}: {batch.n_per_question[k]} forecasts are too few for a "
                f"proper observation-variance conditional with prior exponent {config.prior_exponent_obs}")
        if a_state[k] <= 0:
            raise SamplerError(
                f"question {p.question_id}: horizon {p.horizon} is too short for a proper "
                f"state-variance conditional with prior exponent {config.prior_exponent_state}")
    return np.stack([a_obs, a_state], axis=1)


def _draw_paths(batch, st, z, z0, config):
    sbb, sby = batch.loading_stats(st.bias)
    a, R, m, C, _ = _kernels.forward_filter(sbb, sby, batch.syy, batch.nobs, batch.lengths,
                                            st.drift, st.state_var, st.obs_var,
                                            config.init_mean, config.init_var)
    if config.antithetic:
        z, z0 = -z, -z0
    st.X, st.x0 = _kernels.backward_sample(a, R, m, C, batch.lengths, st.drift, st.state_var,
                                           config.init_mean, config.init_var, z, z0)


def _draw_bias(batch, st, free, zb):
    xc = st.X[batch.cq, batch.ct]
    w = 1.0 / st.obs_var[batch.cq]
    prec = np.bincount(batch.cg, weights=xc * xc * batch.cn * w, minlength=batch.J)
    lin = np.bincount(batch.cg, weights=xc * batch.csy * w, minlength=batch.J)
    b = st.bias.copy()
    b[free] = lin[free] / prec[free] + zb[free] / np.sqrt(prec[free])
    st.bias = b


def _draw_obs_var(batch, st, gam):
    # sum over a cell of (y - b x)^2, expanded in the cell statistics
    bx = st.bias[batch.cg] * st.X[batch.cq, batch.ct]
    cell = batch.csyy - 2.0 * bx * batch.csy + bx * bx * batch.cn
    sse = np.maximum(np.bincount(batch.cq, weights=cell, minlength=batch.K), 0.0)
    st.obs_var = np.maximum(0.5 * sse / gam, 1e-12)


def _draw_drift(batch, st, zg):
    sxx, sxy = _kernels.lag_moments(st.X, st.x0, batch.lengths)
    st.drift = sxy / sxx + np.sqrt(st.state_var / sxx) * zg


def _draw_state_var(batch, st, gam):
    sse = _kernels.ar1_sse(st.X, st.x0, batch.lengths, st.drift)
    st.state_var = np.maximum(0.5 * sse / gam, 1e-12)


def _free_groups(batch: PanelBatch, config: GibbsConfig) -> tuple[np.ndarray, np.ndarray]:
    J = batch.J
    if config.fixed_bias is not None:
        fixed = np.asarray(config.fixed_bias, dtype=float)
        if fixed.size != J:
            raise ValueError(f"fixed_bias has {fixed.size} entries, expected {J}")
        return fixed, np.zeros(J, dtype=bool)
    ref = config.ref_group if config.ref_group is not None else J
    if not 1 <= ref <= J:
        raise ValueError(f"ref_group must lie in 1..{J}")
    free = np.ones(J, dtype=bool)
    free[ref - 1] = False
    for j in np.flatnonzero(free):
        if batch.n_per_group[j] == 0:
            raise SamplerError(f"group {j + 1} has no forecasts; its bias cannot be estimated")
    return np.ones(J), free


def run_sampler(panels: Sequence[QuestionPanel], n_groups: int, config: GibbsConfig,
                on_draw: Callable[[int, _State], None],
                bias_schedule: Callable[[int], np.ndarray] | None = None) -> None:
    """Core loop; calls ``on_draw(i, state)`` on every retained iteration.

    With ``bias_schedule`` the bias is set from it each iteration instead of
    being sampled.
    """
    batch = PanelBatch(panels, n_groups)
    if batch.K == 0:
        raise SamplerError("no questions to sample")
    shapes = _variance_shapes(batch, config)
    if bias_schedule is None:
        bias0, free = _free_groups(batch, config)
    else:
        bias0, free = np.asarray(bias_schedule(0), dtype=float), np.zeros(n_groups, dtype=bool)
    streams = _Streams(config.seed, batch.panels, batch.lengths, batch.Tmax, shapes)
    shared = shared_rng(config.seed)
    K = batch.K
    st = _State(np.zeros((K, batch.Tmax)), np.zeros(K), bias0.copy(),
                np.ones(K), np.ones(K), np.ones(K))
    sample_bias = bias_schedule is None and free.any()
    for i in range(config.iterations):
        z, tail, gam, _ = streams.next()
        if bias_schedule is not None:
            st.bias = np.asarray(bias_schedule(i), dtype=float)
        _draw_paths(batch, st, z, tail[:, 0], config)
        if sample_bias:
            _draw_bias(batch, st, free, shared.standard_normal(batch.J))
        _draw_obs_var(batch, st, gam[:, 0])
        _draw_drift(batch, st, tail[:, 1])
        _draw_state_var(batch, st, gam[:, 1])
        if config.retained(i):
            on_draw(i, st)


class _Recorder:
    def __init__(self, n, K, J, Tmax, lengths):
        self.bias = np.empty((n, J))
        self.obs_var = np.empty((n, K))
        self.drift = np.empty((n, K))
        self.state_var = np.empty((n, K))
        self.paths = np.full((n, K, Tmax), np.nan)
        self.mask = np.arange(Tmax)[None, :] < np.asarray(lengths)[:, None]
        self.n = 0

    def __call__(self, i, st):
        j = self.n
        self.bias[j] = st.bias
        self.obs_var[j] = st.obs_var
        self.drift[j] = st.drift
        self.state_var[j] = st.state_var
        self.paths[j] = np.where(self.mask, st.X, np.nan)
        self.n += 1


def sample_posterior(dataset: Dataset, config: GibbsConfig) -> Chain:
    """Run the constrained Gibbs sampler; returns the thinned post-burn-in chain."""
    panels = dataset.panels
    if not panels:
        raise SamplerError("dataset is empty")
    J = dataset.n_groups
    lengths = np.array([p.horizon for p in panels], dtype=np.int64)
    rec = _Recorder(config.n_retained, len(panels), J, int(lengths.max()), lengths)
    run_sampler(panels, J, config, rec)
    ref = config.ref_group if config.ref_group is not None else J
    return Chain(tuple(dataset.question_ids), lengths, ref, rec.bias, rec.obs_var,
                 rec.drift, rec.state_var, rec.paths)


def posterior_mean(chain) -> ConstrainedDraw:
    """Element-wise average of the retained draws."""
    if isinstance(chain, Chain):
        if len(chain) == 0:
            raise ValueError("empty chain")
        mean_paths = np.mean(chain.paths, axis=0)
        beta = None if chain.beta is None else float(np.mean(chain.beta))
        return ConstrainedDraw(chain.bias.mean(axis=0), chain.obs_var.mean(axis=0),
                               chain.drift.mean(axis=0), chain.state_var.mean(axis=0),
                               tuple(mean_paths[k, :n] for k, n in enumerate(chain.lengths)),
                               chain.question_ids, beta)
    draws = list(chain)
    if not draws:
        raise ValueError("empty chain")
    n = len(draws)
    first = draws[0]
    betas = [d.beta for d in draws]
    return ConstrainedDraw(
        sum(d.bias for d in draws) / n, sum(d.obs_var for d in draws) / n,
        sum(d.drift for d in draws) / n, sum(d.state_var for d in draws) / n,
        tuple(sum(d.paths[k] for d in draws) / n for k in range(len(first.paths))),
        first.question_ids, None if any(b is None for b in betas) else float(np.mean(betas)))


# --- persistence ------------------------------------------------------------

def write_chain(chain: Chain, path) -> None:
    """Line-delimited JSON: one header record, then one record per draw."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"record": "header", "question_ids": list(chain.question_ids),
                  "lengths": [int(n) for n in chain.lengths], "ref_group": int(chain.ref_group),
                  "n_groups": int(chain.n_groups), "info": chain.info}
        fh.write(json.dumps(header) + "\n")
        for i in range(len(chain)):
            rec = {"record": "draw", "index": i,
                   "bias": chain.bias[i].tolist(),
                   "obs_var": chain.obs_var[i].tolist(),
                   "drift": chain.drift[i].tolist(),
                   "state_var": chain.state_var[i].tolist(),
                   "paths": [chain.paths[i, k, :n].tolist() for k, n in enumerate(chain.lengths)]}
            if chain.beta is not None:
                rec["beta"] = float(chain.beta[i])
            fh.write(json.dumps(rec) + "\n")


def read_chain(path) -> Chain:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("record") != "header":
        raise ValueError(f"{path}: missing chain header")
    head, draws = lines[0], lines[1:]
    lengths = np.array(head["lengths"], dtype=np.int64)
    K, n = len(lengths), len(draws)
    Tmax = int(lengths.max()) if K else 0
    paths = np.full((n, K, Tmax), np.nan)
    for i, d in enumerate(draws):
        for k, p in enumerate(d["paths"]):
            paths[i, k, : len(p)] = p
    beta = np.array([d["beta"] for d in draws]) if draws and "beta" in draws[0] else None
    J = head["n_groups"]
    return Chain(tuple(head["question_ids"]), lengths, head["ref_group"],
                 np.array([d["bias"] for d in draws]).reshape(n, J),
                 np.array([d["obs_var"] for d in draws]).reshape(n, K),
                 np.array([d["drift"] for d in draws]).reshape(n, K),
                 np.array([d["state_var"] for d in draws]).reshape(n, K),
                 paths, beta, head.get("info", {}))

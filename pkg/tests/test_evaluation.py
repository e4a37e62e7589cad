import numpy as np
import pytest
from hypothesis import given, strategies as st

from crowdbelief.calibrate import fit_sac
from crowdbelief.domain import Dataset, QuestionPanel, inverse_logit
from crowdbelief.evaluation import (BaselineMethod, BsacMethod, ConstantMethod, EvaluationReport, SacMethod,
                                    SdlmMethod, bias_ordering, format_summary, length_class, make_folds,
                                    method_from_name, question_difficulty, read_reliability, read_scores,
                                    read_summary, reliability, run_cv, summarize, summary_rows,
                                    write_reliability, write_scores, write_summary)
from crowdbelief.gibbs import GibbsConfig, sample_posterior
from crowdbelief.synth import SynthConfig, generate_dataset

from conftest import random_panel


def _dataset(hs, seed=0):
    rng = np.random.default_rng(seed)
    panels = [random_panel(rng, f"q{i}", T=int(T), n_groups=2, empty_rate=0.1, outcome=i % 2)
              for i, T in enumerate(hs)]
    return Dataset(tuple(panels), 2)


def test_length_classes():
    assert [length_class(h) for h in (2, 30, 31, 59, 60, 200)] == ["Short", "Short", "Medium", "Medium",
                                                                  "Long", "Long"]


@given(st.lists(st.integers(2, 120), min_size=10, max_size=60), st.integers(0, 50))
def test_fold_invariants(hs, seed):
    ds = _dataset(hs)
    plan = make_folds(ds, 10, seed)
    flat = sorted(i for f in plan.folds for i in f)
    assert flat == list(range(len(hs)))
    counts = [len(f) for f in plan.folds]
    assert max(counts) - min(counts) <= 1
    totals = plan.day_totals(ds.horizons)
    assert max(totals) - min(totals) <= max(hs)
    train, test = plan.train_test(3)
    assert sorted(train + test) == list(range(len(hs))) and not set(train) & set(test)


def test_fold_examples():
    ds = _dataset([7] * 10)
    plan = make_folds(ds, 10)
    assert all(len(f) == 1 for f in plan.folds)
    assert make_folds(_dataset(range(5, 40), 1), 10, 4) == make_folds(_dataset(range(5, 40), 1), 10, 4)
    with pytest.raises(ValueError):
        make_folds(_dataset([5] * 9), 10)


def test_constant_method_scores_quarter():
    ds = _dataset([4, 7, 3, 9, 5, 6, 2, 8, 4, 5, 10, 3])
    rep = run_cv(ds, {"const": ConstantMethod()}, seed=1)
    assert len(rep.scores["const"]) == sum(h - 1 for h in ds.horizons)
    assert all(s == 0.25 for _, _, s in rep.scores["const"])
    for mode in ("by_day", "by_problem"):
        assert summarize(rep, "const", mode)[0] == 0.25
    assert not rep.failures


def _manual_report(per_q):
    rep = EvaluationReport({q: len(v) + 1 for q, v in per_q.items()})
    rep.scores["m"] = [(q, t + 2, s) for q, v in per_q.items() for t, s in enumerate(v)]
    return rep


def test_summary_weighting_arithmetic():
    rep = _manual_report({"a": [0.1] * 10, "b": [0.3] * 30})
    assert summarize(rep, "m", "by_problem")[0] == pytest.approx(0.2)
    assert summarize(rep, "m", "by_day")[0] == pytest.approx(0.25)
    one = _manual_report({"a": [0.1, 0.2, 0.6]})
    assert summarize(one, "m", "by_day")[0] == pytest.approx(summarize(one, "m", "by_problem")[0])
    assert np.isnan(summarize(one, "m", "by_problem")[1])
    with pytest.raises(ValueError):
        summarize(rep, "m", "Long")
    with pytest.raises(ValueError):
        summarize(rep, "m", "by_day", "Long")


@given(st.lists(st.lists(st.floats(0, 1), min_size=1, max_size=20), min_size=1, max_size=8))
def test_by_day_is_day_weighted_problem_mean(vals):
    rep = _manual_report({f"q{i}": v for i, v in enumerate(vals)})
    n = np.array([len(v) for v in vals])
    means = np.array([np.mean(v) for v in vals])
    assert summarize(rep, "m", "by_day")[0] == pytest.approx(np.dot(n, means) / n.sum(), abs=1e-12)


class _Spy:
    """Aggregator that records the outcomes it was shown."""

    def __init__(self):
        self.seen = []

    def fit(self, train, seed):
        def agg(panels):
            self.seen.extend(p.outcome for p in panels)
            return [np.full(p.horizon, 0.3) for p in panels]
        return agg


def test_held_out_outcomes_never_reach_the_aggregator():
    ds = _dataset(range(3, 15))
    spy = _Spy()
    rep = run_cv(ds, {"spy": spy, "ewma": BaselineMethod(restarts=1)}, seed=0)
    assert spy.seen and all(o is None for o in spy.seen)
    # poisoned labels change scores but not forecasts
    flipped = ds.mirrored()
    poisoned = Dataset(tuple(QuestionPanel(p.question_id, p.horizon, 1 - p.outcome, q.days, q.groups, q.logits,
                                           q.probs, q.experts)
                             for p, q in zip(flipped.panels, ds.panels)), ds.n_groups)
    rep2 = run_cv(poisoned, {"spy": _Spy()}, seed=0)
    assert [f for f in rep.forecasts["spy"]] == [f for f in rep2.forecasts["spy"]]


class _Flaky:
    def fit(self, train, seed):
        if len(train) % 2:
            raise RuntimeError("boom")
        return ConstantMethod().fit(train, seed)


def test_failures_are_annotated():
    ds = _dataset([3] * 11)
    rep = run_cv(ds, {"flaky": _Flaky(), "const": ConstantMethod()}, seed=0)
    # only the fold holding two questions leaves an odd training set
    failed = [f for f in rep.failures if f[0] == "flaky"]
    assert len(failed) == 1 and "boom" in failed[0][2]
    assert len(rep.scores["const"]) == 22 and len(rep.scores["flaky"]) == 18


def test_prefix_property_of_stored_scores():
    ds = _dataset([6, 4, 8, 5, 7, 3, 9, 6, 5, 4, 7])
    method = BaselineMethod(restarts=2)
    rep = run_cv(ds, {"ewma": method}, seed=2)
    plan = make_folds(ds, 10, 2)
    fold_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(2).spawn(10)]
    stored = {(q, t): p for q, t, p in rep.forecasts["ewma"]}
    train_idx, test_idx = plan.train_test(0)
    agg = method.fit(ds.subset(train_idx), fold_seeds[0])
    for i in test_idx:
        p = ds.panels[i].blind()
        for t in range(2, p.horizon + 1):
            assert agg([p.truncated(t)])[0][-1] == stored[(p.question_id, t)]


def test_threads_do_not_change_results():
    ds = _dataset(range(3, 15))
    a = run_cv(ds, {"ewma": BaselineMethod(restarts=1), "c": ConstantMethod(0.4)}, seed=5)
    b = run_cv(ds, {"ewma": BaselineMethod(restarts=1), "c": ConstantMethod(0.4)}, seed=5, threads=3)
    assert a.scores == b.scores


def test_summary_rows_and_text():
    rep = _manual_report({"a": [0.1] * 10, "b": [0.3] * 70})
    rows = summary_rows(rep)
    classes = {(r.mode, r.cls) for r in rows}
    assert ("by_day", "All") in classes and ("by_problem", "Long") in classes
    assert ("by_day", "Medium") not in classes
    text = format_summary(rows)
    for c in ("Short", "Medium", "Long"):
        assert c in text.splitlines()[0]


def test_reliability_constant_half():
    p = np.full(1000, 0.5)
    z = np.r_[np.ones(500), np.zeros(500)]
    t = reliability(p, z, bins=1, n_boot=2000)
    assert len(t) == 1 and t.freq[0] == 0.5 and t.center[0] == 0.5
    assert t.lo[0] < 0.5 < t.hi[0]
    with pytest.raises(ValueError):
        reliability([], [])


def test_bands_widen_with_fewer_forecasts():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, 4000)
    z = (rng.random(4000) < p).astype(float)
    big = reliability(p, z, n_boot=3000, seed=1)
    small = reliability(p[::4], z[::4], n_boot=3000, seed=1)
    assert np.all(small.hi - small.lo > big.hi - big.lo)
    assert np.all(big.lo <= big.center + 0.02) and np.all(big.hi >= big.center - 0.02)


def test_calibrated_and_distorted_forecasts():
    rng = np.random.default_rng(7)
    x = rng.normal(0, 2, 20_000)
    z = (rng.random(x.size) < inverse_logit(x)).astype(float)
    ok = reliability(inverse_logit(x), z, n_boot=2000, seed=3)
    assert ok.n_outside <= 1
    bad = reliability(inverse_logit(x / 2), z, n_boot=2000, seed=3)
    assert bad.n_outside >= 3 and bad.underconfidence_signature()


def test_bias_ordering_examples():
    draws = np.tile([0.2, 0.4, 0.6, 0.8, 1.0], (50, 1))
    rep = bias_ordering(draws, events=["b1<b2<b5", "b5>b1", "b2>b3"])
    assert rep.probabilities["strictly increasing"] == 1.0
    assert rep.probabilities["b5 largest"] == 1.0
    assert rep.probabilities["b1<b2<b5"] == 1.0 and rep.probabilities["b2>b3"] == 0.0
    assert rep.quantiles.shape == (5, 5)
    assert bias_ordering(draws * 0.9).probabilities["all below 1"] == 1.0
    with pytest.raises(ValueError):
        bias_ordering(draws, ["b1 << b2"])
    with pytest.raises(ValueError):
        bias_ordering(draws, ["b1<b9"])


def test_exchangeable_chain_has_uniform_largest():
    rng = np.random.default_rng(0)
    base = rng.normal(size=5)
    draws = np.array([rng.permutation(base) for _ in range(20_000)])
    rep = bias_ordering(draws)
    for j in range(1, 6):
        assert abs(rep.probabilities[f"b{j} largest"] - 0.2) < 4 * np.sqrt(0.16 / 20_000)


def test_bias_ordering_scales_chain_by_beta(small_synth):
    ds, _ = small_synth
    ch = sample_posterior(ds, GibbsConfig(iterations=60, burn_in=20, seed=0))
    ch.beta = np.full(len(ch), 0.01)
    assert bias_ordering(ch).probabilities["all below 1"] == 1.0


def test_question_difficulty_tracks_noise():
    cfg = SynthConfig(horizon=21, experts_per_group=3, n_questions=10)
    lo, _ = generate_dataset(cfg, 3)
    hi, _ = generate_dataset(SynthConfig(horizon=21, experts_per_group=3, n_questions=10, obs_var=2.0), 3)
    g = GibbsConfig(iterations=300, burn_in=100, thin=2, seed=1)
    a = question_difficulty(fit_sac(lo, g, per_draw=False))
    b = question_difficulty(fit_sac(hi, g, per_draw=False))
    wins = sum(rb.disagreement > ra.disagreement for ra, rb in zip(a, b))
    assert wins >= 9
    assert [r.question_id for r in a] == list(lo.question_ids)
    assert all(r.volatility == r.state_var for r in a)


def test_noise_free_panel_has_tiny_disagreement():
    cfg = SynthConfig(horizon=21, experts_per_group=3, n_questions=8, obs_var=0.0)
    ds, _ = generate_dataset(cfg, 5)
    recs = question_difficulty(fit_sac(ds, GibbsConfig(iterations=300, burn_in=100, seed=0), per_draw=False))
    assert max(r.obs_var for r in recs) < 0.05


def test_csv_round_trips(tmp_path):
    rep = _manual_report({"a": [0.1, 0.2], "b": [0.3]})
    write_scores(rep, tmp_path / "s.csv")
    assert read_scores(tmp_path / "s.csv") == rep.scores
    rows = summary_rows(rep)
    write_summary(rows, tmp_path / "m.csv")
    assert read_summary(tmp_path / "m.csv") == rows
    t = reliability(np.linspace(0.05, 0.95, 50), np.tile([0, 1], 25), bins=5, n_boot=500)
    write_reliability(t, tmp_path / "r.csv")
    back = read_reliability(tmp_path / "r.csv")
    for name in ("center", "freq", "count", "lo", "hi"):
        np.testing.assert_array_equal(getattr(back, name), getattr(t, name))
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 1 + 5


def test_method_from_name():
    assert isinstance(method_from_name("sac-brier"), SacMethod)
    assert method_from_name("sac-brier").rule == "brier"
    assert isinstance(method_from_name("bsac"), BsacMethod)
    assert isinstance(method_from_name("sdlm"), SdlmMethod)
    assert method_from_name("ewmla").family == "ewmla"
    assert method_from_name("const-0.3").prob == 0.3
    with pytest.raises(ValueError):
        method_from_name("magic")


@pytest.mark.slow
def test_cv_end_to_end_with_model_methods():
    ds, _ = generate_dataset(SynthConfig(horizon=11, experts_per_group=1, n_questions=10), 2)
    train = GibbsConfig(iterations=60, burn_in=20, thin=2)
    agg = GibbsConfig.aggregation(iterations=60, burn_in=20)
    rep = run_cv(ds, {"sac": SacMethod("log", train, agg), "sdlm": SdlmMethod(agg),
                      "bsac": BsacMethod(train, agg)}, seed=0)
    assert not rep.failures
    for m in ("sac", "sdlm", "bsac"):
        assert len(rep.scores[m]) == 10 * 10
        assert 0 <= summarize(rep, m)[0] <= 1

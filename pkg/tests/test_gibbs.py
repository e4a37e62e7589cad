import numpy as np
import pytest
from scipy import integrate, stats

from crowdbelief.dlm import PanelBatch
from crowdbelief.domain import Dataset, QuestionPanel
from crowdbelief.gibbs import (Chain, ConstrainedDraw, GibbsConfig, SamplerError, _draw_bias,
                               _draw_obs_var, _State, _variance_shapes, posterior_mean, read_chain,
                               sample_posterior, write_chain)
from crowdbelief.synth import SynthConfig, generate_dataset

QUICK = GibbsConfig(iterations=120, burn_in=40, thin=2, seed=5)


def test_config_validation():
    with pytest.raises(ValueError):
        GibbsConfig(iterations=10, burn_in=10)
    with pytest.raises(ValueError):
        GibbsConfig(thin=0)
    c = GibbsConfig(iterations=10, burn_in=4, thin=3)
    assert c.n_retained == 2 and c.retained(4) and c.retained(7) and not c.retained(5)
    assert GibbsConfig.training().iterations == 3000
    agg = GibbsConfig.aggregation()
    assert (agg.iterations, agg.burn_in, agg.thin) == (500, 200, 2)
    assert GibbsConfig.sdlm(3).fixed_bias == (1.0, 1.0, 1.0)


def test_determinism_and_reference_pinning(small_synth):
    ds, _ = small_synth
    a = sample_posterior(ds, QUICK)
    b = sample_posterior(ds, QUICK)
    for name in ("bias", "obs_var", "drift", "state_var"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    np.testing.assert_array_equal(a.paths, b.paths)
    assert len(a) == QUICK.n_retained
    assert np.all(a.bias[:, 4] == 1.0)
    c = sample_posterior(ds, QUICK.with_(ref_group=2))
    assert np.all(c.bias[:, 1] == 1.0)
    assert np.all(a.obs_var > 0) and np.all(a.state_var > 0)


def test_other_seed_differs(small_synth):
    ds, _ = small_synth
    a = sample_posterior(ds, QUICK)
    b = sample_posterior(ds, QUICK.with_(seed=6))
    assert not np.array_equal(a.paths, b.paths)


def test_sdlm_pins_every_bias(small_synth):
    ds, _ = small_synth
    ch = sample_posterior(ds, GibbsConfig.sdlm(5, iterations=60, burn_in=20, seed=1))
    assert np.all(ch.bias == 1.0)


def test_batching_does_not_change_a_question(small_synth):
    # with the bias fixed, questions are conditionally independent and each
    # draws from its own random substream
    ds, _ = small_synth
    cfg = GibbsConfig.sdlm(5, iterations=80, burn_in=20, seed=3)
    full = sample_posterior(ds, cfg)
    solo = sample_posterior(ds.subset([4]), cfg)
    np.testing.assert_array_equal(full.path_array(4), solo.path_array(0))
    np.testing.assert_array_equal(full.obs_var[:, 4], solo.obs_var[:, 0])


def test_mirrored_data_gives_negated_paths(small_synth):
    ds, _ = small_synth
    a = sample_posterior(ds, QUICK)
    b = sample_posterior(ds.mirrored(), QUICK.with_(antithetic=True))
    np.testing.assert_array_equal(a.paths, -b.paths)
    np.testing.assert_array_equal(a.bias, b.bias)
    np.testing.assert_array_equal(a.obs_var, b.obs_var)


def test_noise_free_panel_recovers_common_logit():
    rng = np.random.default_rng(2)
    T = 15
    x = np.cumsum(rng.normal(0, 0.5, T))
    panels = []
    for k in range(3):
        days = np.repeat(np.arange(1, T + 1), 5)
        groups = np.tile(np.arange(1, 6), T)
        y = np.repeat(x + 0.3 * k, 5) + rng.normal(0, 1e-3, 5 * T)
        panels.append(QuestionPanel.from_logits(f"n{k}", T, k % 2, days, groups, y))
    ds = Dataset(tuple(panels), 5)
    ch = sample_posterior(ds, GibbsConfig(iterations=400, burn_in=200, thin=2, seed=0))
    mean = posterior_mean(ch)
    for k in range(3):
        assert np.max(np.abs(mean.paths[k] - (x + 0.3 * k))) < 0.01
    np.testing.assert_allclose(mean.bias, 1.0, atol=0.01)


def test_posterior_mean_examples():
    d = ConstrainedDraw(np.array([0.5, 1.0]), np.array([1.0]), np.array([1.0]), np.array([0.2]),
                        (np.array([0.1, -0.4]),), ("q",))
    one = posterior_mean([d])
    np.testing.assert_array_equal(one.paths[0], d.paths[0])
    np.testing.assert_array_equal(one.bias, d.bias)
    neg = ConstrainedDraw(d.bias, d.obs_var, d.drift, d.state_var, (-d.paths[0],), ("q",))
    np.testing.assert_array_equal(posterior_mean([d, neg]).paths[0], 0.0)
    with pytest.raises(ValueError):
        posterior_mean([])


def test_chain_sequence_protocol(small_synth):
    ds, _ = small_synth
    ch = sample_posterior(ds, QUICK)
    draws = list(ch)
    assert len(draws) == len(ch)
    assert draws[-1].paths[0].shape == (ds.panels[0].horizon,)
    m1, m2 = posterior_mean(ch), posterior_mean(draws)
    np.testing.assert_allclose(m1.bias, m2.bias, rtol=1e-12)
    np.testing.assert_allclose(m1.paths[3], m2.paths[3], rtol=1e-12)
    with pytest.raises(IndexError):
        ch[len(ch)]


def test_chain_file_round_trip(tmp_path, small_synth):
    ds, _ = small_synth
    ch = sample_posterior(ds, QUICK)
    ch.beta = np.linspace(1, 2, len(ch))
    write_chain(ch, tmp_path / "c.jsonl")
    back = read_chain(tmp_path / "c.jsonl")
    assert back.question_ids == ch.question_ids and back.ref_group == ch.ref_group
    for name in ("bias", "obs_var", "drift", "state_var", "beta"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ch, name))
    np.testing.assert_array_equal(back.paths, ch.paths)


def test_group_without_forecasts_is_named():
    p = QuestionPanel.from_logits("q", 10, 1, np.arange(1, 11), [1] * 10, np.zeros(10))
    with pytest.raises(SamplerError, match="group 2"):
        sample_posterior(Dataset((p,), 3), QUICK.with_(ref_group=3))


def test_improper_variance_conditional_names_question():
    p = QuestionPanel.from_logits("tiny", 3, 1, [1, 2], [1, 1], [0.1, 0.2])
    with pytest.raises(SamplerError, match="tiny"):
        sample_posterior(Dataset((p,), 1), QUICK)
    # the Jeffreys exponent accepts the same panel
    sample_posterior(Dataset((p,), 1), QUICK.with_(prior_exponent_obs=-1.0, prior_exponent_state=-1.0))


def _fixture_state():
    rng = np.random.default_rng(8)
    panels = []
    for k in range(3):
        T = 6
        days = np.repeat(np.arange(1, T + 1), 4)
        groups = np.tile([1, 2, 2, 3], T)
        panels.append(QuestionPanel.from_logits(f"c{k}", T, 0, days, groups, rng.normal(0, 1, 4 * T)))
    batch = PanelBatch(panels, 3)
    X = rng.normal(0, 1, (3, 6))
    st = _State(X, np.zeros(3), np.array([0.7, 1.2, 1.0]), np.array([0.5, 1.0, 2.0]),
                np.ones(3), np.ones(3))
    return panels, batch, st


def test_bias_conditional_matches_closed_form():
    panels, batch, st = _fixture_state()
    # closed form written directly over individual forecasts
    prec = np.zeros(3)
    lin = np.zeros(3)
    for k, p in enumerate(panels):
        for d, g, y in zip(p.days, p.groups, p.logits):
            x = st.X[k, d - 1]
            prec[g - 1] += x * x / st.obs_var[k]
            lin[g - 1] += x * y / st.obs_var[k]
    free = np.array([True, True, False])
    rng = np.random.default_rng(0)
    n = 50_000
    draws = np.empty((n, 3))
    for i in range(n):
        s = _State(st.X, st.x0, st.bias.copy(), st.obs_var, st.drift, st.state_var)
        _draw_bias(batch, s, free, rng.standard_normal(3))
        draws[i] = s.bias
    mean, sd = lin / prec, 1 / np.sqrt(prec)
    for j in (0, 1):
        assert abs(draws[:, j].mean() - mean[j]) < 3 * sd[j] / np.sqrt(n)
        se_var = sd[j] ** 2 * np.sqrt(2 / (n - 1))
        assert abs(draws[:, j].var(ddof=1) - sd[j] ** 2) < 3 * se_var
    assert np.all(draws[:, 2] == 1.0)


@pytest.mark.parametrize("exponent", [1.0, -1.0])
def test_obs_var_conditional_is_normalized_and_sampled(exponent):
    panels, batch, st = _fixture_state()
    cfg = GibbsConfig(prior_exponent_obs=exponent)
    shape = _variance_shapes(batch, cfg)[:, 0]
    sse = np.zeros(3)
    for k, p in enumerate(panels):
        r = p.logits - st.bias[p.groups - 1] * st.X[k, p.days - 1]
        sse[k] = r @ r
    n_k = np.array([p.n_forecasts for p in panels])
    rng = np.random.default_rng(1)
    n = 50_000
    draws = np.empty((n, 3))
    for i in range(n):
        s = _State(st.X, st.x0, st.bias, st.obs_var.copy(), st.drift, st.state_var)
        _draw_obs_var(batch, s, rng.standard_gamma(shape))
        draws[i] = s.obs_var
    for k in range(3):
        # prior (s2)^exponent times the Gaussian likelihood, normalized numerically
        def unnorm(s2, k=k):
            return np.exp(exponent * np.log(s2) - 0.5 * n_k[k] * np.log(s2) - sse[k] / (2 * s2)
                          + 0.5 * n_k[k] * np.log(sse[k]))
        upper = sse[k] * 5
        Z, _ = integrate.quad(unnorm, 1e-9, upper, limit=200)
        ig = stats.invgamma(shape[k], scale=sse[k] / 2)
        total, _ = integrate.quad(ig.pdf, 1e-9, upper, limit=200)
        assert abs(total - 1) < 1e-3
        m1, _ = integrate.quad(lambda s2: s2 * unnorm(s2) / Z, 1e-9, upper, limit=200)
        assert m1 == pytest.approx(ig.mean(), rel=1e-3)
        se = draws[:, k].std() / np.sqrt(n)
        assert abs(draws[:, k].mean() - m1) < 4 * se


def test_long_chain_reference():
    rng = np.random.default_rng(4)
    T = 8
    days = np.repeat(np.arange(1, T + 1), 4)
    groups = np.tile([1, 2, 2, 1], T)
    x = np.linspace(-1, 2, T)
    p = QuestionPanel.from_logits("ref", T, 1, days, groups, np.repeat(x, 4) + rng.normal(0, 0.5, 4 * T))
    ds = Dataset((p,), 2)
    cfg = GibbsConfig.sdlm(2, iterations=2200, burn_in=200, thin=1, seed=21)
    short = sample_posterior(ds, cfg)
    ref = sample_posterior(ds, cfg.with_(iterations=100_200, seed=99))
    for t in (0, T - 1):
        x_short = short.paths[:, 0, t]
        # batch-means standard error absorbs autocorrelation
        batches = x_short.reshape(20, -1).mean(axis=1)
        se = batches.std(ddof=1) / np.sqrt(20)
        assert abs(x_short.mean() - ref.paths[:, 0, t].mean()) < 3.5 * se


def test_bias_recovery_on_synthetic():
    ds, truths = generate_dataset(SynthConfig(horizon=41, n_questions=20, experts_per_group=4), 5)
    ch = sample_posterior(ds, GibbsConfig(iterations=300, burn_in=100, thin=2, seed=0))
    ratio = posterior_mean(ch).bias
    np.testing.assert_allclose(ratio, truths[0].bias / truths[0].bias[-1], atol=0.03)
    assert isinstance(ch, Chain)

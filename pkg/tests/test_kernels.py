"""Compiled and pure-numpy kernels must agree; the incomplete beta must match
closed forms and an independent implementation."""

import os
import subprocess
import sys

import numpy as np
import pytest
import scipy.special as sc
from hypothesis import given, strategies as st

from crowdbelief import _kernels
from crowdbelief._kernels import _numpy

nb = pytest.importorskip("crowdbelief._kernels._numba")


def _padded_inputs(rng, K=6, Tmax=9):
    lengths = rng.integers(2, Tmax + 1, K)
    mask = np.arange(Tmax)[None, :] < lengths[:, None]
    nobs = rng.integers(0, 4, (K, Tmax)) * mask
    sbb = nobs * rng.uniform(0.3, 2.0, (K, Tmax))
    sby = nobs * rng.normal(0, 2, (K, Tmax))
    syy = nobs * rng.uniform(0.5, 5, (K, Tmax))
    return (sbb.astype(float), sby, syy, nobs.astype(float), lengths.astype(np.int64), mask)


def test_forward_backward_agree(rng):
    sbb, sby, syy, nobs, L, mask = _padded_inputs(rng)
    K, Tmax = sbb.shape
    g = rng.uniform(0.8, 1.2, K)
    t2 = rng.uniform(0.0, 1.0, K)
    t2[0] = 0.0
    s2 = rng.uniform(0.3, 2.0, K)
    out_np = _numpy.forward_filter(sbb, sby, syy, nobs, L, g, t2, s2, 0.1, 1.3)
    out_nb = nb.forward_filter(sbb, sby, syy, nobs, L, g, t2, s2, 0.1, 1.3)
    for a, b in zip(out_np, out_nb):
        np.testing.assert_allclose(np.where(mask, a, 0) if a.ndim == 2 else a,
                                   np.where(mask, b, 0) if b.ndim == 2 else b, rtol=1e-12, atol=1e-12)
    z = rng.standard_normal((K, Tmax))
    z0 = rng.standard_normal(K)
    X1, x01 = _numpy.backward_sample(*out_np[:4], L, g, t2, 0.1, 1.3, z, z0)
    X2, x02 = nb.backward_sample(*out_nb[:4], L, g, t2, 0.1, 1.3, z, z0)
    np.testing.assert_allclose(np.where(mask, X1, 0), np.where(mask, X2, 0), rtol=1e-11, atol=1e-12)
    np.testing.assert_allclose(x01, x02, rtol=1e-11, atol=1e-12)


def test_moment_kernels_agree_and_ignore_padding(rng):
    K, Tmax = 5, 8
    L = rng.integers(2, Tmax + 1, K)
    mask = np.arange(Tmax)[None, :] < L[:, None]
    X = rng.normal(size=(K, Tmax))
    Xpad = np.where(mask, X, 1e6)
    x0 = rng.normal(size=K)
    g = rng.uniform(0.5, 1.5, K)
    for mod in (_numpy, nb):
        sxx, sxy = mod.lag_moments(Xpad, x0, L)
        sse = mod.ar1_sse(Xpad, x0, L, g)
        for k in range(K):
            prev = np.r_[x0[k], X[k, : L[k] - 1]]
            cur = X[k, : L[k]]
            assert sxx[k] == pytest.approx(prev @ prev, rel=1e-12)
            assert sxy[k] == pytest.approx(prev @ cur, rel=1e-12)
            assert sse[k] == pytest.approx(np.sum((cur - g[k] * prev) ** 2), rel=1e-12)


def test_ewm_recursion_agree(rng):
    K, Tmax = 4, 10
    L = np.array([10, 7, 3, 10])
    vals = rng.uniform(0, 1, (K, Tmax))
    has = rng.random((K, Tmax)) < 0.6
    has[3] = False
    for alpha in (0.0, 0.35, 1.0):
        a = _numpy.ewm_recursion(vals, has, L, alpha, 0.5)
        b = nb.ewm_recursion(vals, has, L, alpha, 0.5)
        mask = np.arange(Tmax)[None, :] < L[:, None]
        np.testing.assert_allclose(np.where(mask, a, 0), np.where(mask, b, 0), rtol=1e-14)
        assert np.all(a[3, :10] == 0.5)


def test_bsac_sweep_agree(rng):
    sbb, sby, syy, nobs, L, mask = _padded_inputs(rng)
    K, Tmax = sbb.shape
    X0 = np.where(mask, rng.normal(size=(K, Tmax)), 0.0)
    args = dict(x0=rng.normal(size=K), lengths=L, gamma=np.ones(K), tau2=np.full(K, 0.5),
                sigma2=np.ones(K), sbb=sbb, sby=sby, outcome=rng.integers(0, 2, K).astype(float),
                beta=1.3, weight=1.0, step=np.full(K, 1.5), z=rng.standard_normal((K, Tmax)),
                logu=np.log(rng.random((K, Tmax))))
    Xa, Xb = X0.copy(), X0.copy()
    acc_a = _numpy.bsac_sweep(Xa, **args)
    acc_b = nb.bsac_sweep(Xb, **args)
    np.testing.assert_allclose(Xa, Xb, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(acc_a, acc_b)
    assert np.all(acc_a <= L)


def _closed_form(x, a, b):
    # I_x(a, b) = P(Binomial(a + b - 1, x) >= a) for integer shapes
    n = a + b - 1
    return sum(sc.comb(n, j, exact=True) * x ** j * (1 - x) ** (n - j) for j in range(a, n + 1))


@pytest.mark.parametrize("mod", [_numpy, nb], ids=["numpy", "numba"])
def test_betainc_integer_shapes(mod):
    x = np.round(np.arange(1, 100) / 100, 2)
    for a in range(1, 5):
        for b in range(1, 5):
            got = mod.betainc(x, float(a), float(b))
            want = np.array([_closed_form(v, a, b) for v in x])
            assert np.max(np.abs(got - want)) < 1e-10, (a, b)


def test_betainc_reference_value():
    assert abs(_kernels.betainc(0.7, 2.0, 2.0) - 0.784) < 1e-12
    assert isinstance(_kernels.betainc(0.7, 2.0, 2.0), float)
    assert _kernels.betainc(0.5, 3.3, 3.3) == pytest.approx(0.5, abs=1e-13)


@given(st.floats(0.0, 1.0), st.floats(0.05, 30.0), st.floats(0.05, 30.0))
def test_betainc_matches_independent_implementation(x, a, b):
    assert abs(_kernels.betainc(x, a, b) - sc.betainc(a, b, x)) < 1e-11


def test_betainc_endpoints_and_shape():
    out = _kernels.betainc(np.array([[0.0, 1.0], [0.25, 0.75]]), 2.5, 0.7)
    assert out.shape == (2, 2)
    assert out[0, 0] == 0.0 and out[0, 1] == 1.0


def test_backend_switch_by_environment():
    code = "from crowdbelief import _kernels; print(_kernels.BACKEND)"
    env = dict(os.environ, CROWDBELIEF_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    env["CROWDBELIEF_DISABLE_NUMBA"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numba"

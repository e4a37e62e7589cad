"""Pure-numpy kernels.

Each kernel loops over the time axis and vectorizes across questions, so the
cost per call is O(Tmax) numpy operations on length-K vectors. Results agree
with the compiled kernels to rounding.
"""

import numpy as np

VAR_FLOOR = 1e-12
LOG_2PI = float(np.log(2.0 * np.pi))


def forward_filter(sbb, sby, syy, nobs, lengths, gamma, tau2, sigma2, mu0, c0):
    K, Tmax = sbb.shape
    a = np.zeros((K, Tmax))
    R = np.zeros((K, Tmax))
    m = np.zeros((K, Tmax))
    C = np.zeros((K, Tmax))
    loglik = np.zeros(K)
    prev_m = np.full(K, float(mu0))
    prev_C = np.full(K, float(c0))
    g2 = gamma * gamma
    for t in range(Tmax):
        live = t < lengths
        at = gamma * prev_m
        Rt = np.maximum(g2 * prev_C + tau2, VAR_FLOOR)
        n = nobs[:, t]
        obs = live & (n > 0)
        lam2 = sbb[:, t] / sigma2
        prec = 1.0 / Rt + lam2
        Ct = np.where(obs, 1.0 / prec, Rt)
        mt = np.where(obs, Ct * (at / Rt + sby[:, t] / sigma2), at)
        Ct = np.maximum(Ct, VAR_FLOOR)

        ee = syy[:, t] - 2.0 * at * sby[:, t] + at * at * sbb[:, t]
        le = sby[:, t] - at * sbb[:, t]
        s = 1.0 + Rt * lam2
        quad = ee / sigma2 - (Rt / (sigma2 * sigma2)) * le * le / s
        ll = -0.5 * (n * LOG_2PI + n * np.log(sigma2) + np.log(s) + quad)
        loglik += np.where(obs, ll, 0.0)

        a[:, t] = np.where(live, at, 0.0)
        R[:, t] = np.where(live, Rt, 0.0)
        m[:, t] = np.where(live, mt, 0.0)
        C[:, t] = np.where(live, Ct, 0.0)
        prev_m = np.where(live, mt, prev_m)
        prev_C = np.where(live, Ct, prev_C)
    return a, R, m, C, loglik


def backward_sample(a, R, m, C, lengths, gamma, tau2, mu0, c0, z, z0):
    K, Tmax = m.shape
    X = np.zeros((K, Tmax))
    rows = np.arange(K)
    last = lengths - 1
    nxt = m[rows, last] + np.sqrt(C[rows, last]) * z[rows, last]
    X[rows, last] = nxt
    exact = (tau2 == 0.0) & (gamma != 0.0)
    safe_g = np.where(exact, gamma, 1.0)
    for t in range(Tmax - 2, -1, -1):
        inner = t < last
        if not inner.any():
            continue
        Rn = R[:, t + 1]
        Rn = np.where(inner, Rn, 1.0)
        Ct = C[:, t]
        h = m[:, t] + (gamma * Ct / Rn) * (X[:, t + 1] - a[:, t + 1])
        H = Ct * tau2 / Rn
        draw = h + np.sqrt(H) * z[:, t]
        # deterministic drift: invert the transition exactly
        draw = np.where(exact, X[:, t + 1] / safe_g, draw)
        X[:, t] = np.where(inner, draw, X[:, t])
    R1 = R[:, 0]
    h0 = mu0 + (gamma * c0 / R1) * (X[:, 0] - a[:, 0])
    H0 = c0 * tau2 / R1
    x0 = np.where(exact, X[:, 0] / safe_g, h0 + np.sqrt(H0) * z0)
    return X, x0


def _lagged(X, x0):
    return np.concatenate([x0[:, None], X[:, :-1]], axis=1)


def _masked_cumsum_at(values, lengths):
    K, Tmax = values.shape
    mask = np.arange(Tmax)[None, :] < lengths[:, None]
    cs = np.cumsum(np.where(mask, values, 0.0), axis=1)
    return cs[np.arange(K), lengths - 1]


def lag_moments(X, x0, lengths):
    prev = _lagged(X, x0)
    return (_masked_cumsum_at(prev * prev, lengths),
            _masked_cumsum_at(X * prev, lengths))


def ar1_sse(X, x0, lengths, gamma):
    prev = _lagged(X, x0)
    r = X - gamma[:, None] * prev
    return _masked_cumsum_at(r * r, lengths)


def ewm_recursion(values, has, lengths, alpha, start):
    K, Tmax = values.shape
    out = np.zeros((K, Tmax))
    p = np.full(K, float(start))
    started = np.zeros(K, dtype=bool)
    for t in range(Tmax):
        live = t < lengths
        h = has[:, t] & live
        smoothed = np.where(started, alpha * values[:, t] + (1.0 - alpha) * p, values[:, t])
        p = np.where(h, smoothed, p)
        started = started | h
        out[:, t] = np.where(live, p, 0.0)
    return out


def log_expit(u):
    return np.minimum(u, 0.0) - np.log1p(np.exp(-np.abs(u)))


def bsac_sweep(X, x0, lengths, gamma, tau2, sigma2, sbb, sby, outcome,
               beta, weight, step, z, logu):
    """One checkerboard Metropolis sweep over hidden states, in place."""
    K, Tmax = X.shape
    accepted = np.zeros(K)
    cols = np.arange(Tmax)
    live = cols[None, :] < lengths[:, None]
    has_next = cols[None, :] < (lengths - 1)[:, None]
    g = gamma[:, None]
    t2 = tau2[:, None]
    s2 = sigma2[:, None]
    zc = outcome[:, None]
    prec = 1.0 / t2 + np.where(has_next, g * g / t2, 0.0) + sbb / s2
    sd = step[:, None] / np.sqrt(prec)
    for parity in (0, 1):
        sel = live & ((cols % 2) == parity)[None, :]
        prev = np.concatenate([x0[:, None], X[:, :-1]], axis=1)
        nxt = np.concatenate([X[:, 1:], np.zeros((K, 1))], axis=1)
        lin = g * prev / t2 + np.where(has_next, g * nxt / t2, 0.0) + sby / s2
        cur = X
        prop = cur + sd * z
        u_cur = cur / beta
        u_prop = prop / beta
        oc = zc * log_expit(u_cur) + (1.0 - zc) * log_expit(-u_cur)
        op = zc * log_expit(u_prop) + (1.0 - zc) * log_expit(-u_prop)
        diff = (-0.5 * prec * (prop * prop - cur * cur) + lin * (prop - cur)
                + weight * (op - oc))
        acc = sel & (logu < diff)
        X[...] = np.where(acc, prop, X)
        accepted += acc.sum(axis=1)
    return accepted


# Regularized incomplete beta via the modified Lentz continued fraction.

_CF_TINY = 1e-300
_CF_EPS = 1e-16
_CF_MAXIT = 10000


def _betacf(x, a, b):
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
    d = 1.0 / d
    h = d.copy()
    done = np.zeros(x.shape, dtype=bool)
    for mi in range(1, _CF_MAXIT + 1):
        m2 = 2 * mi
        aa = mi * (b - mi) * x / ((qam + m2) * (a + m2))
        d_new = 1.0 + aa * d
        d_new = np.where(np.abs(d_new) < _CF_TINY, _CF_TINY, d_new)
        c_new = 1.0 + aa / c
        c_new = np.where(np.abs(c_new) < _CF_TINY, _CF_TINY, c_new)
        d_new = 1.0 / d_new
        h_new = h * d_new * c_new
        aa = -(a + mi) * (qab + mi) * x / ((a + m2) * (qap + m2))
        d2 = 1.0 + aa * d_new
        d2 = np.where(np.abs(d2) < _CF_TINY, _CF_TINY, d2)
        c2 = 1.0 + aa / c_new
        c2 = np.where(np.abs(c2) < _CF_TINY, _CF_TINY, c2)
        d2 = 1.0 / d2
        delta = d2 * c2
        h_new = h_new * delta
        h = np.where(done, h, h_new)
        c = np.where(done, c, c2)
        d = np.where(done, d, d2)
        done = done | (np.abs(delta - 1.0) < _CF_EPS)
        if done.all():
            break
    return h


def betainc(x, a, b):
    from math import lgamma

    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    out[x <= 0.0] = 0.0
    out[x >= 1.0] = 1.0
    inner = (x > 0.0) & (x < 1.0)
    xi = x[inner]
    if xi.size:
        lbeta = lgamma(a + b) - lgamma(a) - lgamma(b)
        front = np.exp(lbeta + a * np.log(xi) + b * np.log1p(-xi))
        direct = xi < (a + 1.0) / (a + b + 2.0)
        res = np.empty_like(xi)
        if direct.any():
            xd = xi[direct]
            res[direct] = front[direct] * _betacf(xd, a, b) / a
        if (~direct).any():
            xs = xi[~direct]
            res[~direct] = 1.0 - front[~direct] * _betacf(1.0 - xs, b, a) / b
        out[inner] = res
    return out

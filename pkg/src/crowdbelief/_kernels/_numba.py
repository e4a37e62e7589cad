"""Compiled kernels: scalar loops under ``numba.njit``.

Same signatures and arithmetic as :mod:`._numpy`; see there for the
vectorized reference.
"""

import math

import numpy as np
from numba import njit

VAR_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True)
def forward_filter(sbb, sby, syy, nobs, lengths, gamma, tau2, sigma2, mu0, c0):
    K, Tmax = sbb.shape
    a = np.zeros((K, Tmax))
    R = np.zeros((K, Tmax))
    m = np.zeros((K, Tmax))
    C = np.zeros((K, Tmax))
    loglik = np.zeros(K)
    for k in range(K):
        g = gamma[k]
        s2 = sigma2[k]
        pm = mu0
        pc = c0
        ll = 0.0
        for t in range(lengths[k]):
            at = g * pm
            Rt = max(g * g * pc + tau2[k], VAR_FLOOR)
            n = nobs[k, t]
            if n > 0:
                lam2 = sbb[k, t] / s2
                Ct = 1.0 / (1.0 / Rt + lam2)
                mt = Ct * (at / Rt + sby[k, t] / s2)
                ee = syy[k, t] - 2.0 * at * sby[k, t] + at * at * sbb[k, t]
                le = sby[k, t] - at * sbb[k, t]
                s = 1.0 + Rt * lam2
                quad = ee / s2 - (Rt / (s2 * s2)) * le * le / s
                ll += -0.5 * (n * LOG_2PI + n * math.log(s2) + math.log(s) + quad)
            else:
                Ct = Rt
                mt = at
            Ct = max(Ct, VAR_FLOOR)
            a[k, t] = at
            R[k, t] = Rt
            m[k, t] = mt
            C[k, t] = Ct
            pm = mt
            pc = Ct
        loglik[k] = ll
    return a, R, m, C, loglik


@njit(cache=True)
def backward_sample(a, R, m, C, lengths, gamma, tau2, mu0, c0, z, z0):
    K, Tmax = m.shape
    X = np.zeros((K, Tmax))
    x0 = np.zeros(K)
    for k in range(K):
        last = lengths[k] - 1
        X[k, last] = m[k, last] + math.sqrt(C[k, last]) * z[k, last]
        g = gamma[k]
        exact = tau2[k] == 0.0 and g != 0.0
        for t in range(last - 1, -1, -1):
            if exact:
                # deterministic drift: invert the transition exactly
                X[k, t] = X[k, t + 1] / g
                continue
            Rn = R[k, t + 1]
            Ct = C[k, t]
            h = m[k, t] + (g * Ct / Rn) * (X[k, t + 1] - a[k, t + 1])
            H = Ct * tau2[k] / Rn
            X[k, t] = h + math.sqrt(H) * z[k, t]
        if exact:
            x0[k] = X[k, 0] / g
            continue
        R1 = R[k, 0]
        h0 = mu0 + (g * c0 / R1) * (X[k, 0] - a[k, 0])
        H0 = c0 * tau2[k] / R1
        x0[k] = h0 + math.sqrt(H0) * z0[k]
    return X, x0


@njit(cache=True)
def lag_moments(X, x0, lengths):
    K = X.shape[0]
    sxx = np.zeros(K)
    sxy = np.zeros(K)
    for k in range(K):
        prev = x0[k]
        a = 0.0
        b = 0.0
        for t in range(lengths[k]):
            a += prev * prev
            b += X[k, t] * prev
            prev = X[k, t]
        sxx[k] = a
        sxy[k] = b
    return sxx, sxy


@njit(cache=True)
def ar1_sse(X, x0, lengths, gamma):
    K = X.shape[0]
    out = np.zeros(K)
    for k in range(K):
        prev = x0[k]
        acc = 0.0
        for t in range(lengths[k]):
            r = X[k, t] - gamma[k] * prev
            acc += r * r
            prev = X[k, t]
        out[k] = acc
    return out


@njit(cache=True)
def ewm_recursion(values, has, lengths, alpha, start):
    K, Tmax = values.shape
    out = np.zeros((K, Tmax))
    for k in range(K):
        p = start
        started = False
        for t in range(lengths[k]):
            if has[k, t]:
                if started:
                    p = alpha * values[k, t] + (1.0 - alpha) * p
                else:
                    p = values[k, t]
                    started = True
            out[k, t] = p
    return out


@njit(cache=True)
def _log_expit(u):
    return min(u, 0.0) - math.log1p(math.exp(-abs(u)))


@njit(cache=True)
def bsac_sweep(X, x0, lengths, gamma, tau2, sigma2, sbb, sby, outcome,
               beta, weight, step, z, logu):
    K = X.shape[0]
    accepted = np.zeros(K)
    for k in range(K):
        g = gamma[k]
        t2 = tau2[k]
        s2 = sigma2[k]
        zc = outcome[k]
        last = lengths[k] - 1
        for parity in range(2):
            for t in range(parity, lengths[k], 2):
                has_next = t < last
                prec = 1.0 / t2 + sbb[k, t] / s2
                if has_next:
                    prec += g * g / t2
                prev = x0[k] if t == 0 else X[k, t - 1]
                lin = g * prev / t2 + sby[k, t] / s2
                if has_next:
                    lin += g * X[k, t + 1] / t2
                cur = X[k, t]
                prop = cur + step[k] / math.sqrt(prec) * z[k, t]
                uc = cur / beta
                up = prop / beta
                oc = zc * _log_expit(uc) + (1.0 - zc) * _log_expit(-uc)
                op = zc * _log_expit(up) + (1.0 - zc) * _log_expit(-up)
                diff = (-0.5 * prec * (prop * prop - cur * cur) + lin * (prop - cur)
                        + weight * (op - oc))
                if logu[k, t] < diff:
                    X[k, t] = prop
                    accepted[k] += 1.0
    return accepted


_CF_TINY = 1e-300
_CF_EPS = 1e-16
_CF_MAXIT = 10000


@njit(cache=True)
def _betacf(x, a, b):
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for mi in range(1, _CF_MAXIT + 1):
        m2 = 2 * mi
        aa = mi * (b - mi) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + mi) * (qab + mi) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            break
    return h


@njit(cache=True)
def betainc(x, a, b):
    flat = x.ravel()
    res = np.empty(flat.size)
    lbeta = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    for i in range(flat.size):
        xi = flat[i]
        if xi <= 0.0:
            res[i] = 0.0
        elif xi >= 1.0:
            res[i] = 1.0
        else:
            front = math.exp(lbeta + a * math.log(xi) + b * math.log1p(-xi))
            if xi < (a + 1.0) / (a + b + 2.0):
                res[i] = front * _betacf(xi, a, b) / a
            else:
                res[i] = 1.0 - front * _betacf(1.0 - xi, b, a) / b
    return res.reshape(x.shape)

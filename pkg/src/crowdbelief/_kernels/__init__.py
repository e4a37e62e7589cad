"""Hot numeric kernels with a compiled and a pure-numpy implementation.

The compiled path is used when numba imports cleanly and the environment
variable ``CROWDBELIEF_DISABLE_NUMBA`` is unset (or ``0``/``false``). Both
modules expose identical functions; :data:`BACKEND` names the active one.
"""

import os

import numpy as np

from . import _numpy

_disabled = os.environ.get("CROWDBELIEF_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

_compiled = None
if not _disabled:
    try:
        from . import _numba as _compiled
    except ImportError:  # numba missing or broken
        _compiled = None

_impl = _compiled if _compiled is not None else _numpy
BACKEND = "numba" if _compiled is not None else "numpy"


def _f(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def forward_filter(sbb, sby, syy, nobs, lengths, gamma, tau2, sigma2, mu0, c0):
    """Batched scalar-state Kalman filter over padded (K, Tmax) day statistics.

    Returns ``(a, R, m, C, loglik)``; entries past each question's length are 0.
    """
    return _impl.forward_filter(_f(sbb), _f(sby), _f(syy), _f(nobs), _i(lengths),
                                _f(gamma), _f(tau2), _f(sigma2), float(mu0), float(c0))


def backward_sample(a, R, m, C, lengths, gamma, tau2, mu0, c0, z, z0):
    """Backward pass turning filter output and standard normals into paths.

    Returns ``(X, x0)`` where ``x0`` is the draw of the pre-sample state.
    """
    return _impl.backward_sample(_f(a), _f(R), _f(m), _f(C), _i(lengths), _f(gamma),
                                 _f(tau2), float(mu0), float(c0), _f(z), _f(z0))


def lag_moments(X, x0, lengths):
    return _impl.lag_moments(_f(X), _f(x0), _i(lengths))


def ar1_sse(X, x0, lengths, gamma):
    return _impl.ar1_sse(_f(X), _f(x0), _i(lengths), _f(gamma))


def ewm_recursion(values, has, lengths, alpha, start=0.5):
    """Exponentially weighted recursion with carry-forward on empty days."""
    return _impl.ewm_recursion(_f(values), np.ascontiguousarray(has, dtype=np.bool_),
                               _i(lengths), float(alpha), float(start))


def bsac_sweep(X, x0, lengths, gamma, tau2, sigma2, sbb, sby, outcome,
               beta, weight, step, z, logu):
    """Checkerboard random-walk Metropolis sweep; updates ``X`` in place."""
    if not (X.flags.c_contiguous and X.dtype == np.float64):
        raise ValueError("X must be a C-contiguous float64 array")
    return _impl.bsac_sweep(X, _f(x0), _i(lengths), _f(gamma), _f(tau2), _f(sigma2),
                            _f(sbb), _f(sby), _f(outcome), float(beta), float(weight),
                            _f(step), _f(z), _f(logu))


def betainc(x, a, b):
    """Regularized incomplete beta I_x(a, b), elementwise in ``x``."""
    x = np.asarray(x, dtype=np.float64)
    out = _impl.betainc(np.ascontiguousarray(np.atleast_1d(x)), float(a), float(b))
    return out.reshape(x.shape) if x.ndim else float(out[0])

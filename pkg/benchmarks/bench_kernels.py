"""Time the compiled and pure-numpy kernels on the same inputs.

    python benchmarks/bench_kernels.py [--K 200] [--T 100] [--repeat 5]

Also times a short end-to-end Gibbs run under each backend in a subprocess,
since the backend is fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from crowdbelief._kernels import _numba, _numpy


def _best(fn, repeat):
    fn()  # warm-up, includes compilation for numba
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def _inputs(K, T, rng):
    lengths = rng.integers(T // 2, T + 1, K).astype(np.int64)
    nobs = rng.poisson(5, (K, T)).astype(float)
    sbb = nobs * 1.2
    sby = rng.normal(size=(K, T)) * nobs
    syy = sby ** 2 / np.maximum(nobs, 1) + nobs
    gamma = np.full(K, 1.01)
    tau2 = np.full(K, 0.05)
    sigma2 = np.full(K, 0.8)
    z = rng.standard_normal((K, T))
    z0 = rng.standard_normal(K)
    return sbb, sby, syy, nobs, lengths, gamma, tau2, sigma2, z, z0


def kernel_table(K, T, repeat, seed=0):
    rng = np.random.default_rng(seed)
    sbb, sby, syy, nobs, lengths, gamma, tau2, sigma2, z, z0 = _inputs(K, T, rng)
    vals = rng.uniform(0.05, 0.95, (K, T))
    has = rng.random((K, T)) < 0.7
    xs = rng.uniform(0, 1, K * T)
    rows = []
    for name, mod in (("numba", _numba), ("numpy", _numpy)):
        def ffbs(mod=mod):
            a, R, m, C, _ = mod.forward_filter(sbb, sby, syy, nobs, lengths, gamma, tau2, sigma2, 0.0, 1.0)
            mod.backward_sample(a, R, m, C, lengths, gamma, tau2, 0.0, 1.0, z, z0)

        rows.append((name, "ffbs", _best(ffbs, repeat)))
        rows.append((name, "ewm_recursion", _best(lambda mod=mod: mod.ewm_recursion(vals, has, lengths, 0.3, 0.5),
                                                  repeat)))
        rows.append((name, "betainc", _best(lambda mod=mod: mod.betainc(xs, 2.5, 1.7), repeat)))
    return rows


_GIBBS = """
import time
from crowdbelief.synth import SynthConfig, generate_dataset
from crowdbelief.gibbs import GibbsConfig, sample_posterior
from crowdbelief._kernels import BACKEND
ds, _ = generate_dataset(SynthConfig(horizon={T}, experts_per_group=2, n_questions={K}), 0)
sample_posterior(ds, GibbsConfig(iterations=20, burn_in=10, thin=1))
t = time.perf_counter()
sample_posterior(ds, GibbsConfig(iterations={it}, burn_in=0, thin=1))
print(BACKEND, time.perf_counter() - t)
"""


def gibbs_table(K, T, iterations):
    out = []
    for disable in ("0", "1"):
        env = dict(os.environ, CROWDBELIEF_DISABLE_NUMBA=disable)
        res = subprocess.run([sys.executable, "-c", _GIBBS.format(K=K, T=T, it=iterations)], env=env,
                             capture_output=True, text=True, check=True)
        backend, secs = res.stdout.split()
        out.append((backend, f"gibbs {iterations} it", float(secs)))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--K", type=int, default=200)
    ap.add_argument("--T", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--iterations", type=int, default=200)
    args = ap.parse_args(argv)
    rows = kernel_table(args.K, args.T, args.repeat) + gibbs_table(args.K // 4, args.T, args.iterations)
    print(f"K={args.K} T={args.T}")
    print(f"{'backend':8} {'kernel':18} {'seconds':>10}")
    for backend, kernel, secs in sorted(rows, key=lambda r: (r[1], r[0])):
        print(f"{backend:8} {kernel:18} {secs:10.5f}")


if __name__ == "__main__":
    main()

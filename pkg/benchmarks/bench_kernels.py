"""Compare the numba kernels with their numpy fallbacks (and LAPACK for the bank step).

Usage::

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

The numba path is what ``RBPMMH_NUMBA=1`` (the default) selects; the numpy
path is what ``RBPMMH_NUMBA=0`` selects. Both are timed in one process by
flipping the dispatch flag, after a warm-up call that absorbs JIT compilation.
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from rbpmmh import _accel
from rbpmmh.kernels import ar1_along_zones, kf_bank_step, systematic_indices
from rbpmmh.rbsmc import smc_run
from rbpmmh.scenario import ScenarioSpec, default_true_psi, generate


def best_of(fn, repeat: int) -> float:
    fn()  # warm-up (JIT compile, caches)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bank_problem(rng, n_p, n, d_y):
    B = rng.standard_normal((n_p, n, n))
    P = B @ np.swapaxes(B, 1, 2) / n + 0.05 * np.eye(n)
    m = rng.standard_normal((n_p, n))
    rho = rng.uniform(0.1, 0.9, n_p)
    idx = np.arange(n)
    Sigma = 0.01 * np.exp(-np.abs(idx[:, None] - idx[None]) / 3.0)
    A = rng.standard_normal((d_y, n)) / np.sqrt(n)
    J = A.T @ A / 0.05 ** 2
    r = rng.standard_normal(d_y)
    return P, m, rho, Sigma, J, A.T @ r / 0.05 ** 2, float(r @ r) / 0.05 ** 2


def with_flag(flag: bool, fn):
    def run():
        saved = _accel.USE_NUMBA
        _accel.USE_NUMBA = flag
        try:
            fn()
        finally:
            _accel.USE_NUMBA = saved
    return run


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write the results to this file")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    rows = []

    impls = ["numpy", "lapack"] + (["numba"] if _accel.HAVE_NUMBA else [])
    for n_p, n_zones, d_y in ((100, 2, 12), (100, 5, 40), (100, 10, 80), (20, 50, 400)):
        n = 4 * n_zones
        prob = bank_problem(rng, n_p, n, d_y)
        for impl in impls:
            t = best_of(lambda: kf_bank_step(*prob, impl=impl), max(3, args.repeat // (1 + n // 40)))
            rows.append({"kernel": "kf_bank_step", "shape": f"Np={n_p} n={n}", "impl": impl, "seconds": t})

    for n_p in (100, 10_000):
        w = rng.random(n_p)
        for flag in (False, True):
            t = best_of(with_flag(flag, lambda: systematic_indices(w, 0.37)), args.repeat * 5)
            rows.append({"kernel": "systematic_indices", "shape": f"Np={n_p}",
                         "impl": "numba" if flag else "numpy", "seconds": t})

    eps = rng.standard_normal((100, 4, 50))
    for flag in (False, True):
        t = best_of(with_flag(flag, lambda: ar1_along_zones(eps, 0.7)), args.repeat * 5)
        rows.append({"kernel": "ar1_along_zones", "shape": "100x4x50", "impl": "numba" if flag else "numpy",
                     "seconds": t})

    spec = ScenarioSpec(n_zones=5, n_freqs=8, freq_band=(1e9, 5e9), n_angles=10, true_psi=default_true_psi(),
                        sigma=0.1, length_scale=2.0, sigma_rho=0.1, noise_level=0.05, seed=0)
    ds, _ = generate(spec)
    for flag in (False, True):
        run = with_flag(flag, lambda: smc_run(spec.true_psi, ds, spec.model, 100, np.random.default_rng(1),
                                              sample_path=False))
        rows.append({"kernel": "smc_run", "shape": "N=5 K=8 d_y=40 Np=100", "impl": "numba" if flag else "numpy",
                     "seconds": best_of(run, max(3, args.repeat // 4))})

    if not _accel.HAVE_NUMBA:
        rows = [r for r in rows if r["impl"] != "numba"]
    width = max(len(r["kernel"] + r["shape"]) for r in rows) + 3
    print(f"{'kernel / shape':<{width}} {'impl':<7} {'ms':>10}")
    for r in rows:
        print(f"{r['kernel'] + ' ' + r['shape']:<{width}} {r['impl']:<7} {1e3 * r['seconds']:>10.3f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

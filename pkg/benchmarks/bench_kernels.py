"""Benchmark the compiled kernels against their pure-numpy fallbacks.

Runs both backends of each hot kernel on training-scale batches, checks the
results agree, and prints a timing table::

    python3 benchmarks/bench_kernels.py [--repeats 5] [--quick]

The same kernels honor ``SEQOED_NUMBA=0`` for process-wide backend selection;
this script instead passes ``backend=`` explicitly so a single process can
time both paths (the first numba call is excluded as compilation).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from seqoed import kernels


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def bench_sir(repeats, quick):
    n_paths = 32 if quick else 125
    n_steps = 2_000 if quick else 50_000          # one bank chunk at dt=0.002
    rng = np.random.default_rng(0)
    beta = np.exp(rng.normal(np.log(0.5), 0.5, size=n_paths))
    rho = np.exp(rng.normal(np.log(0.1), 0.5, size=n_paths))
    noise = rng.standard_normal((n_paths, n_steps, 2))
    save_every = n_steps // 100

    def run(backend):
        return kernels.sir_paths(beta, rho, 498.0, 2.0, 500.0, 0.002,
                                 save_every, noise, backend=backend)

    np.testing.assert_array_equal(run("numba"), run("numpy"))
    label = f"sir_paths        {n_paths} paths x {n_steps} steps"
    return label, best_of(lambda: run("numba"), repeats), \
        best_of(lambda: run("numpy"), repeats)


def bench_gmm(repeats, quick, grads):
    n = 2_000 if quick else 10_000                # reward-recompute batch
    k, d = 8, 2
    rng = np.random.default_rng(1)
    x = rng.normal(size=(n, d))
    w = rng.dirichlet(np.ones(k), size=n)
    mu = rng.normal(size=(n, k, d))
    sig = rng.uniform(0.1, 1.0, size=(n, k, d))
    lo, hi = np.full(d, -6.0), np.full(d, 6.0)
    fn = kernels.gmm_logpdf_grads if grads else kernels.gmm_logpdf_batch

    def run(backend):
        return fn(x, w, mu, sig, lo, hi, backend=backend)

    a, b = run("numba"), run("numpy")
    if not grads:
        a, b = (a,), (b,)
    for got, want in zip(a, b):
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-300)
    name = "gmm_logpdf_grads" if grads else "gmm_logpdf_batch"
    label = f"{name} {n} rows, K={k}, D={d}"
    return label, best_of(lambda: run("numba"), repeats), \
        best_of(lambda: run("numpy"), repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timed repetitions; best time is reported")
    parser.add_argument("--quick", action="store_true",
                        help="small shapes for a fast smoke run")
    args = parser.parse_args()

    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is unavailable in this environment; "
                         "only the numpy fallback can run")

    rows = [
        bench_sir(args.repeats, args.quick),
        bench_gmm(args.repeats, args.quick, grads=False),
        bench_gmm(args.repeats, args.quick, grads=True),
    ]
    width = max(len(label) for label, _, _ in rows)
    print(f"{'kernel & shape':<{width}}  {'numba':>10}  {'numpy':>10}  speedup")
    for label, t_nb, t_np in rows:
        print(f"{label:<{width}}  {t_nb * 1e3:>8.2f}ms  {t_np * 1e3:>8.2f}ms  "
              f"{t_np / t_nb:>6.1f}x")


if __name__ == "__main__":
    main()

"""Benchmark the compiled cell solver against the numpy fallback.

Run:  python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from hdrpanel import _kernels_py
from hdrpanel._backend import BACKEND, kernels


def make_case(T, n_cells, d, link_id, seed):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(T)] + [rng.normal(size=T) for _ in range(d - 1)])
    beta = rng.normal(size=d)
    p = 1.0 / (1.0 + np.exp(X @ beta))
    y = rng.random(T)
    # thresholds sweep the outcome range like a coefficient field fit
    cuts = np.quantile(y, np.linspace(0.05, 0.95, n_cells))
    B = (y[None, :] <= cuts[:, None]).astype(np.uint8)
    _ = p
    return np.ascontiguousarray(X), B


def bench(fn, X, B, link_id, repeats=3):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(X, B, link_id, 100, 1e-8, 50.0, True)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    print(f"active backend: {BACKEND}")
    cases = [
        ("T=50   d=1 cells=49  (QTE field, per unit)", 50, 49, 1, 1),
        ("T=100  d=2 cells=7   (coverage grid, per unit)", 100, 7, 2, 1),
        ("T=500  d=2 cells=99  (goodness-of-fit, per unit)", 500, 99, 2, 0),
        ("T=2000 d=3 cells=200 (large unit)", 2000, 200, 3, 0),
    ]
    print(f"{'case':<50} {'cython':>10} {'numpy':>10} {'speedup':>8}")
    for name, T, nc, d, link_id in cases:
        X, B = make_case(T, nc, d, link_id, seed=42)
        t_py = bench(_kernels_py.fit_cells, X, B, link_id)
        if kernels is _kernels_py:
            print(f"{name:<50} {'n/a':>10} {t_py*1e3:>8.2f}ms {'-':>8}")
            continue
        t_cy = bench(kernels.fit_cells, X, B, link_id)
        b_cy = kernels.fit_cells(X, B, link_id, 100, 1e-8, 50.0, True)[0]
        b_py = _kernels_py.fit_cells(X, B, link_id, 100, 1e-8, 50.0, True)[0]
        agree = np.allclose(b_cy, b_py, atol=1e-7)
        print(f"{name:<50} {t_cy*1e3:>8.2f}ms {t_py*1e3:>8.2f}ms {t_py/t_cy:>7.1f}x"
              + ("" if agree else "  [MISMATCH]"))


if __name__ == "__main__":
    main()

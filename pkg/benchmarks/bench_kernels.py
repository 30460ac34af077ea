#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times the three hot paths (loss, gradient, full backtracking descent) on a
few desk-scale configurations and prints a comparison table. Run:

    python benchmarks/bench_kernels.py [--repeats 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from linland._kernels import numpy_backend, widths_array

try:
    from linland._kernels import numba_backend
except ImportError:
    numba_backend = None


CONFIGS = [
    ((3, 1, 3), 6),
    ((4, 3, 2, 3, 4), 10),
    ((8, 6, 4, 6, 8), 16),
]


def _instance(widths, m, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((widths[0], m))
    Y = rng.standard_normal((widths[-1], m))
    theta = np.concatenate(
        [
            (rng.standard_normal((widths[i + 1], widths[i])) / np.sqrt(widths[i])).ravel()
            for i in range(len(widths) - 1)
        ]
    )
    return theta, widths_array(widths), X, Y


def _time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(backend, theta, widths, X, Y, repeats):
    rec = np.empty(1)
    n_calls = 2000

    def many_loss():
        for _ in range(n_calls):
            backend.loss_flat(theta, widths, X, Y)

    def many_grad():
        for _ in range(n_calls):
            backend.grad_flat(theta, widths, X, Y)

    def descent():
        backend.gd_chunk(
            theta, widths, X, Y, False, 0.05, 1e-10, 5000,
            0.5, 2.0, 1e-4, 1e12, rec, rec, False,
        )

    loss_t = _time(many_loss, repeats) / n_calls
    grad_t = _time(many_grad, repeats) / n_calls
    gd_t = _time(descent, repeats)
    return loss_t, grad_t, gd_t


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = [("numpy", numpy_backend)]
    if numba_backend is not None:
        backends.append(("numba", numba_backend))
        # warm the JIT outside the timed region
        theta, widths, X, Y = _instance(CONFIGS[0][0], CONFIGS[0][1])
        rec = np.empty(1)
        numba_backend.loss_flat(theta, widths, X, Y)
        numba_backend.grad_flat(theta, widths, X, Y)
        numba_backend.gd_chunk(theta, widths, X, Y, False, 0.05, 1e-10, 10,
                               0.5, 2.0, 1e-4, 1e12, rec, rec, False)
    else:
        print("numba not importable; timing the numpy fallback only\n")

    header = f"{'dims':>18} {'backend':>7} {'loss':>12} {'grad':>12} {'5k GD steps':>12}"
    print(header)
    print("-" * len(header))
    results = {}
    for widths, m in CONFIGS:
        theta, wa, X, Y = _instance(widths, m)
        for name, backend in backends:
            loss_t, grad_t, gd_t = bench_backend(backend, theta, wa, X, Y, args.repeats)
            results[(widths, name)] = gd_t
            print(
                f"{str(widths):>18} {name:>7} {loss_t * 1e6:>10.2f}us "
                f"{grad_t * 1e6:>10.2f}us {gd_t * 1e3:>10.1f}ms"
            )
        if numba_backend is not None:
            speedup = results[(widths, 'numpy')] / results[(widths, 'numba')]
            print(f"{'':>18} {'':>7} {'':>12} {'':>12} {speedup:>9.1f}x faster")
    print()


if __name__ == "__main__":
    main()

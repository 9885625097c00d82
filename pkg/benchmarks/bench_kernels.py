"""Time the compiled kernels against the numpy fallback on solver-sized inputs.

Run: python benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from robust_mfg import _kernels_py as py

try:
    from robust_mfg import _kernels as cy
except ImportError:  # extension not built
    cy = None


def cases(P: int = 20000, K: int = 50, fm_points: int = 40000):
    rng = np.random.default_rng(0)
    n = d = 1
    x0 = np.ones((P, n))
    a = np.zeros((K, n))
    b = np.full((K, n, n), -0.1)
    c = np.ones((K, n, n))
    nu = np.full((K, n, d), 0.5)
    sig = np.zeros((K, n, d, n))
    psi = rng.normal(size=(P, K, n))
    dw = rng.normal(scale=np.sqrt(0.25 / K), size=(P, K, d))
    ys = np.zeros((P, K))
    zs = rng.normal(size=(P, K, d))
    x = np.sort(rng.normal(size=fm_points))
    w = rng.normal(size=fm_points) / fm_points
    return {
        "euler_paths": lambda m: m.euler_paths(x0, a, b, c, nu, sig, psi, dw, 0.25 / K, 0),
        "log_density": lambda m: m.log_density(ys, zs, dw, 0.25 / K),
        "fm_dual_1d": lambda m: m.fm_dual_1d(x, w),
    }


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':<14s} {'python [ms]':>12s} {'cython [ms]':>12s} {'speed-up':>9s}  max |diff|")
    for name, fn in cases().items():
        tp = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:<14s} {tp:12.2f} {'n/a':>12s}")
            continue
        tc = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        diff = float(np.max(np.abs(np.asarray(fn(py)) - np.asarray(fn(cy)))))
        print(f"{name:<14s} {tp:12.2f} {tc:12.2f} {tp / tc:9.2f}  {diff:.2e}")


if __name__ == "__main__":
    main()

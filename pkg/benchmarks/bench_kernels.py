"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from eqfpn import _kernels_py

try:
    from eqfpn import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    for rows, dim in [(500, 5), (500, 25), (2000, 100)]:
        Z = rng.normal(size=(rows, dim))
        yield f"simplex {rows}x{dim}", "project_simplex_rows", (Z,)
    for B, K, n in [(500, 1, 5), (100, 528, 76)]:
        z = rng.normal(size=(B, K, n))
        x = rng.normal(size=(B, K, n))
        g = rng.normal(size=(B, n))
        yield f"minkowski step {B}x{K}x{n}", "minkowski_orthant_step", (z, x, g, 0.1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'case':32s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for label, name, inputs in cases(rng):
        py = getattr(_kernels_py, name)
        t_py = min(timeit.repeat(lambda: py(*inputs), number=3, repeat=args.repeat)) / 3
        if _kernels is None:
            print(f"{label:32s} {1e3 * t_py:10.3f} {'n/a':>10s}")
            continue
        cy = getattr(_kernels, name)
        a, b = py(*inputs), cy(*inputs)
        for u, v in zip(a, b):
            np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)
        t_cy = min(timeit.repeat(lambda: cy(*inputs), number=3, repeat=args.repeat)) / 3
        print(f"{label:32s} {1e3 * t_py:10.3f} {1e3 * t_cy:10.3f} {t_py / t_cy:8.2f}")


if __name__ == "__main__":
    main()

"""Time the compiled assignment kernel against the numpy fallback.

    python benchmarks/bench_assign.py [--sizes 8 32 64 128 256] [--repeat 5]

SciPy's ``linear_sum_assignment`` is timed as an external reference.
Every backend is checked to reach the same optimal cost before timing.
"""

import argparse
import timeit

import numpy as np
from scipy.optimize import linear_sum_assignment

from tsflow import _lsa_py

try:
    from tsflow import _lsa
except ImportError:
    _lsa = None


def best_of(fn, repeat: int) -> float:
    number = 1
    # grow the loop count until one measurement takes ~0.05 s
    while timeit.timeit(fn, number=number) < 0.05 and number < 10_000:
        number *= 4
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[8, 32, 64, 128, 256])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _lsa is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")

    rng = np.random.default_rng(args.seed)
    print(f"{'n':>5} {'cython ms':>10} {'numpy ms':>10} {'scipy ms':>10} {'speedup':>8}")
    for n in args.sizes:
        # squared-distance costs, as produced during OT training
        x0, x1 = rng.normal(size=(n, 48)), rng.normal(size=(n, 48))
        cost = np.ascontiguousarray(((x0[:, None] - x1[None]) ** 2).sum(-1))
        rows, cols = linear_sum_assignment(cost)
        ref = cost[rows, cols].sum()
        perm, _, _ = _lsa_py.solve(cost)
        assert np.isclose(cost[np.arange(n), perm].sum(), ref)
        t_py = best_of(lambda: _lsa_py.solve(cost), args.repeat)
        t_sp = best_of(lambda: linear_sum_assignment(cost), args.repeat)
        if _lsa is not None:
            perm, _, _ = _lsa.solve(cost)
            assert np.isclose(cost[np.arange(n), perm].sum(), ref)
            t_cy = best_of(lambda: _lsa.solve(cost), args.repeat)
            print(f"{n:>5} {t_cy * 1e3:>10.3f} {t_py * 1e3:>10.3f} {t_sp * 1e3:>10.3f} {t_py / t_cy:>7.1f}x")
        else:
            print(f"{n:>5} {'-':>10} {t_py * 1e3:>10.3f} {t_sp * 1e3:>10.3f} {'-':>8}")


if __name__ == "__main__":
    main()

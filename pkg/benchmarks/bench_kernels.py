"""Compiled vs pure-Python kernels: wall time per call and agreement.

Run ``python benchmarks/bench_kernels.py`` after ``pip install -e .``.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from misret import _pykernels

try:
    from misret import _kernels
except ImportError:  # pragma: no cover
    _kernels = None


def cases(rng: np.random.Generator):
    rewards = rng.uniform(0, 5, 30)
    values = rng.normal(size=2000)
    n_users, n_items, rank, nnz = 200, 50, 8, 5000
    rows = rng.integers(0, n_users, nnz).astype(np.int64)
    cols = rng.integers(0, n_items, nnz).astype(np.int64)
    vals = rng.uniform(0, 5, nnz)
    P0 = rng.normal(0, 0.1, (n_users, rank))
    Q0 = rng.normal(0, 0.1, (n_items, rank))
    order = rng.permutation(nnz).astype(np.int64)[None, :]

    def mf(mod):
        P, Q = P0.copy(), Q0.copy()
        mod.mf_sgd(rows, cols, vals, P, Q, 0.01, 0.01, 1, order)
        return P

    return {
        "returns_to_go (30 steps)": lambda mod: mod.returns_to_go(rewards, 0.99),
        "expectile_fit (2000 values)": lambda mod: mod.expectile_fit(values, 0.99),
        "mf_sgd (5000 ratings, 1 epoch)": mf,
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not built; only the Python fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s} {'max abs diff':>13s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=3, repeat=args.repeat)) / 3 * 1e3
        if _kernels is None:
            print(f"{name:32s} {t_py:10.3f} {'-':>10s}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_kernels), number=3, repeat=args.repeat)) / 3 * 1e3
        diff = float(np.max(np.abs(np.asarray(fn(_pykernels)) - np.asarray(fn(_kernels)))))
        print(f"{name:32s} {t_py:10.3f} {t_c:10.3f} {t_py / t_c:8.1f} {diff:13.2e}")


if __name__ == "__main__":
    main()

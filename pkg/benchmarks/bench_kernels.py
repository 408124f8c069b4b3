"""Time the compiled kernels against the pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from cosmosfl import _pykernels

try:
    from cosmosfl import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    stack = rng.dirichlet(np.ones(10), size=(50, 2000))
    pts = rng.random((400, 3))
    dist = np.abs(pts[:, None] - pts[None]).sum(axis=2)
    probs = rng.dirichlet(np.ones(10), size=100_000)
    return [
        ("l1_distance_matrix 50x2000x10", "l1_distance_matrix", (stack,)),
        ("greedy_cluster N=400", "greedy_cluster", (dist, 0.6)),
        ("argmax_rows 1e5x10", "argmax_rows", (probs,)),
        ("top2_margin 1e5x10", "top2_margin", (probs,)),
    ]


def best_time(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<32} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for label, name, fargs in cases(rng):
        py = best_time(getattr(_pykernels, name), fargs, args.repeat)
        if _ckernels is None:
            print(f"{label:<32} {py * 1e3:>10.2f} {'n/a':>10} {'':>8}")
            continue
        cy = best_time(getattr(_ckernels, name), fargs, args.repeat)
        print(f"{label:<32} {py * 1e3:>10.2f} {cy * 1e3:>10.2f} {py / cy:>7.1f}x")


if __name__ == "__main__":
    main()

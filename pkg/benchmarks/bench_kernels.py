"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from radssl import _kernels_py

try:
    from radssl import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def cases(rng):
    g = 16
    n = 10 * g * g
    h = rng.integers(1, 5, n)
    w = rng.integers(1, 5, n)
    tops = rng.integers(-3, g, n)
    lefts = rng.integers(-3, g, n)
    pos, neg = rng.normal(1, 1, 400), rng.normal(0, 1, 600)
    t = rng.exponential(1, 1000)
    e = rng.random(1000) < 0.7
    r = rng.normal(size=1000)
    return {
        "rasterize_blocks (16x16, need 103)": lambda k: k.rasterize_blocks(tops, lefts, h, w, g, g, 103),
        "rasterize_blocks (16x16, need 256)": lambda k: k.rasterize_blocks(tops, lefts, h, w, g, g, 256),
        "auc_pair_counts (400 x 600)": lambda k: k.auc_pair_counts(pos, neg),
        "concordance_counts (n=1000)": lambda k: k.concordance_counts(t, e, r),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':38s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        tp = min(timeit.repeat(lambda: fn(_kernels_py), number=args.number, repeat=args.repeat)) / args.number
        if _kernels_c is None:
            print(f"{name:38s} {tp * 1e3:10.3f} {'n/a':>10s} {'':>8s}")
            continue
        assert fn(_kernels_py)[1] == fn(_kernels_c)[1]
        tc = min(timeit.repeat(lambda: fn(_kernels_c), number=args.number, repeat=args.repeat)) / args.number
        print(f"{name:38s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()

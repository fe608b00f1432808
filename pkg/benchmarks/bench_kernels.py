"""Time the compiled kernels against the pure-Python fallback.

Run from the repository root::

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each case checks that both backends return identical results before timing.
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from celltissue import _kernels


def nms_case(rng, side=512, n=4000):
    rows = rng.integers(0, side, n)
    cols = rng.integers(0, side, n)
    return (rows, cols, 7, side, side)


def match_case(rng, n_det=600, n_gt=600, side=1024):
    dx, dy = rng.uniform(0, side, n_det), rng.uniform(0, side, n_det)
    gx, gy = rng.uniform(0, side, n_gt), rng.uniform(0, side, n_gt)
    return (dx, dy, rng.integers(1, 3, n_det), gx, gy, rng.integers(1, 3, n_gt), 15.0)


def raster_case(rng, n=1500, side=1024):
    return (rng.uniform(0, side, n), rng.uniform(0, side, n), rng.integers(1, 3, n), side, 7.0)


CASES = {
    "greedy_nms": nms_case,
    "greedy_match": match_case,
    "rasterize_disks": raster_case,
}


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def run(repeat: int = 5, seed: int = 0) -> dict:
    if _kernels.compiled is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(seed)
    out = {}
    for name, make in CASES.items():
        args = make(rng)
        fast = getattr(_kernels.compiled, name)
        slow = getattr(_kernels.fallback, name)
        if not _same(fast(*args), slow(*args)):
            raise AssertionError(f"{name}: backends disagree")
        t_fast = min(timeit.repeat(lambda: fast(*args), number=1, repeat=repeat))
        t_slow = min(timeit.repeat(lambda: slow(*args), number=1, repeat=repeat))
        out[name] = {"cython_s": t_fast, "python_s": t_slow, "speedup": t_slow / t_fast}
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the timings here")
    args = ap.parse_args(argv)
    res = run(args.repeat, args.seed)
    print(f"{'kernel':<18}{'cython ms':>12}{'python ms':>12}{'speedup':>10}")
    for name, r in res.items():
        print(f"{name:<18}{1e3 * r['cython_s']:>12.2f}{1e3 * r['python_s']:>12.2f}{r['speedup']:>9.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(res, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())

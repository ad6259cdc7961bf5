"""Time the compiled and pure-Python ranking scans on the same ranked lists.

    python benchmarks/bench_eval.py --queries 1000 --gallery 15913 --ids 751

The distance matrix and argsort are shared, so only the per-query scan is timed.
"""
import argparse
import time

import numpy as np

from trangcn.metrics import _BACKENDS, available_backends


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--queries", type=int, default=1000)
    ap.add_argument("--gallery", type=int, default=15913)
    ap.add_argument("--ids", type=int, default=751)
    ap.add_argument("--cams", type=int, default=6)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    q_ids = rng.integers(args.ids, size=args.queries)
    g_ids = rng.integers(args.ids, size=args.gallery)
    q_cams = rng.integers(1, args.cams + 1, size=args.queries)
    g_cams = rng.integers(1, args.cams + 1, size=args.gallery)
    order = np.ascontiguousarray(np.argsort(rng.random((args.queries, args.gallery)), axis=1).astype(np.int64))

    print(f"scan of {args.queries} queries x {args.gallery} gallery, best of {args.repeat}")
    results, timings = {}, {}
    for name in available_backends():
        fn = _BACKENDS[name]
        best = float("inf")
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            results[name] = fn(order, q_ids, g_ids, q_cams, g_cams, True)
            best = min(best, time.perf_counter() - t0)
        timings[name] = best
        print(f"  {name:<8} {best * 1e3:10.1f} ms")
    if len(results) > 1:
        (a, ra), (b, rb) = results.items()
        same = all(np.array_equal(x, y, equal_nan=True) for x, y in zip(ra, rb))
        print(f"  outputs identical: {same}; speedup {timings['python'] / timings['cython']:.1f}x")
    else:
        print("  compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()

"""Compare the numba and numpy backends of the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs once to warm up (JIT compilation is excluded), then the
best of ``--repeat`` timings is reported together with the speedup and the
largest absolute difference between the two backends' outputs.
"""
import argparse
import json
import time

import numpy as np

from primseg import _kernels


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def _diff(a, b):
    if isinstance(a, tuple):
        return max(_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def cases(rng):
    mats = rng.normal(size=(4096, 3, 3))
    z = rng.normal(size=(2048, 32))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    queries = rng.normal(size=(10_000, 3))
    points = rng.normal(size=(2048, 3))
    return {
        "svd3 (4096 batched 3x3)": lambda impl: impl.svd3(mats),
        "nearest (10000 x 2048)": lambda impl: impl.nearest(queries, points),
        "kth_neighbor (2048 x 32-d, k=100)": lambda impl: impl.kth_neighbor_distance(z, 100),
        "density (2048 x 32-d)": lambda impl: impl.density(z, 0.5),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", default=None, help="also write results as JSON")
    args = ap.parse_args()
    if _kernels.numba_impl is None:
        raise SystemExit("numba is not installed; only the numpy backend is available")
    rows = []
    for name, run in cases(np.random.default_rng(args.seed)).items():
        t_np = _best(lambda: run(_kernels.numpy_impl), args.repeat)
        t_nb = _best(lambda: run(_kernels.numba_impl), args.repeat)
        diff = _diff(run(_kernels.numpy_impl), run(_kernels.numba_impl))
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb,
                     "speedup": t_np / t_nb, "max_abs_diff": diff})
    print(f"{'kernel':36s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s} {'max diff':>10s}")
    for r in rows:
        print(f"{r['kernel']:36s} {r['numpy_s'] * 1e3:8.2f}ms {r['numba_s'] * 1e3:8.2f}ms "
              f"{r['speedup']:7.1f}x {r['max_abs_diff']:10.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()

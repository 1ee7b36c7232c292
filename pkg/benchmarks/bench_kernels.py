#!/usr/bin/env python3
"""Benchmark the compiled kernel backend against the pure numpy fallback.

Runs each hot kernel on representative workloads, checks the backends agree,
and prints per-kernel timings with the speedup. Usage:

    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from objreid._kernels import pure

try:
    from objreid._kernels import _core as compiled
except ImportError:
    compiled = None


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t0)
    return best, result


def workloads():
    rng = np.random.default_rng(0)

    pts = np.ascontiguousarray(rng.uniform(-50, 50, (1500, 3)))
    yield ("dbscan_labels  n=1500 eps=3 min_pts=3",
           lambda impl: impl.dbscan_labels(pts, 3.0, 3),
           lambda a, b: np.array_equal(np.asarray(a), np.asarray(b)))

    cloud = np.ascontiguousarray(rng.uniform(-30, 30, (500_000, 3)))
    center = np.array([1.0, -2.0, 0.5])
    dims = np.array([4.0, 6.0, 3.0])
    yield ("points_in_box  n=500k",
           lambda impl: impl.points_in_box_count(cloud, center, dims, 0.7),
           lambda a, b: a == b)

    z = rng.standard_normal((256, 128))
    z = np.ascontiguousarray(z / np.linalg.norm(z, axis=1, keepdims=True))
    labels = rng.integers(0, 32, 256).astype(np.int64)
    yield ("supcon_loss_grad  batch=256 dim=128",
           lambda impl: impl.supcon_loss_grad(z, labels, 0.07, True),
           lambda a, b: (abs(a[0] - b[0]) < 1e-9
                         and np.abs(np.asarray(a[1]) - np.asarray(b[1])).max() < 1e-9))

    rel = np.ascontiguousarray((rng.random(2000) > 0.97).astype(np.uint8))
    yield ("rank_stats  n=2000 (typical gallery)",
           lambda impl: impl.rank_stats(rel),
           lambda a, b: a[1] == b[1] and abs(a[0] - b[0]) < 1e-12)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if compiled is None:
        print("compiled backend not built; showing pure timings only\n")
    header = f"{'kernel':44s} {'pure':>10s} {'compiled':>10s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for name, call, agree in workloads():
        t_pure, r_pure = timeit(lambda: call(pure), args.repeats)
        if compiled is None:
            print(f"{name:44s} {t_pure * 1e3:9.2f}ms {'-':>10s} {'-':>8s}")
            continue
        t_comp, r_comp = timeit(lambda: call(compiled), args.repeats)
        assert agree(r_pure, r_comp), f"backend mismatch in {name}"
        print(f"{name:44s} {t_pure * 1e3:9.2f}ms {t_comp * 1e3:9.2f}ms "
              f"{t_pure / t_comp:7.2f}x")


if __name__ == "__main__":
    main()

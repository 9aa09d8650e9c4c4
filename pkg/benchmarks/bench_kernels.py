"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run:  python benchmarks/bench_kernels.py [--repeats 5]

Compares every dual-path kernel on production-sized inputs and prints the
per-call latency of both backends plus the speedup. The numba path is
warmed once before timing so JIT compilation is excluded.
"""

import argparse
import time

import numpy as np

from mvmatch import kernels


def timeit(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if not kernels.HAS_NUMBA:
        print("numba backend unavailable (missing or disabled); nothing to compare")
        return 1

    rng = np.random.default_rng(0)
    h, w, c = 168, 168, 32

    feat = rng.normal(size=(h, w, c))
    tgt = rng.normal(size=(h, w, c))
    targets = rng.uniform(0, w - 1, size=(h, w, 2))
    xs = rng.uniform(-2, w + 1, h * w)
    ys = rng.uniform(-2, h + 1, h * w)
    scores = rng.uniform(-0.5, 1.0, size=(h, w))
    n_pts = 200_000
    px = rng.integers(0, w, n_pts)
    py = rng.integers(0, h, n_pts)
    depth = rng.uniform(1, 10, n_pts)
    coords = rng.uniform(0, w - 1, size=(h, w, 2))
    valid = rng.random((h, w)) < 0.3
    valid[0, 0] = True
    conv_w = rng.normal(size=(3, 3, c, c))
    conv_b = np.zeros(c)
    dw_w = rng.normal(size=(7, 7, c))

    cases = [
        ("bilinear_gather (28k pts, 32ch)",
         lambda: kernels.bilinear_gather(feat, xs, ys),
         lambda: kernels.bilinear_gather_numpy(feat, xs, ys)),
        ("local_corr (168^2, win 5)",
         lambda: kernels.local_corr(feat, tgt, targets, 5),
         lambda: kernels.local_corr_numpy(feat, tgt, targets, 5)),
        ("upsample_linear (x2)",
         lambda: kernels.upsample_linear(feat, 2),
         lambda: kernels.upsample_linear_numpy(feat, 2)),
        ("nms_greedy (168^2, r=2)",
         lambda: kernels.nms_greedy(scores, 2, -1),
         lambda: kernels.nms_greedy_numpy(scores, 2, scores.size + 1)),
        ("zbuffer_min (200k pts)",
         lambda: kernels.zbuffer_min(px, py, depth, h, w),
         lambda: kernels.zbuffer_min_numpy(px, py, depth, h, w)),
        ("fill_nearest (70% holes)",
         lambda: kernels.fill_nearest(coords, valid),
         lambda: kernels.fill_nearest_numpy(coords, valid)),
        ("conv2d 3x3 (32->32)",
         lambda: kernels.conv2d_numba(feat, conv_w, conv_b),
         lambda: kernels.conv2d_numpy(feat, conv_w, conv_b)),
        ("depthwise 7x7",
         lambda: kernels.depthwise_conv2d_numba(feat, dw_w, conv_b),
         lambda: kernels.depthwise_conv2d_numpy(feat, dw_w, conv_b)),
    ]

    print(f"backend: {kernels.BACKEND}; repeats: {args.repeats} (best time shown)")
    print(f"{'kernel':38s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}")
    for name, nb, npy in cases:
        nb()  # warm the JIT
        t_nb = timeit(nb, args.repeats)
        t_np = timeit(npy, args.repeats)
        print(f"{name:38s} {t_nb * 1e3:9.2f}ms {t_np * 1e3:9.2f}ms "
              f"{t_np / t_nb:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

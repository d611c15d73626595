"""Time the numba kernels against their pure-numpy twins.

Input shapes mirror a desk-scale localization run: a thousand-feature
bank, tens of thousands of sampled pixels, a deep routing tree, and
preemptive-RANSAC-sized hypothesis scoring. Numba compilation happens
during warmup, outside the timed region.

    python3 benchmarks/bench_kernels.py [--repeats N] [--pixels P]
"""

import argparse
import time

import numpy as np

from sceneloc import kernels
from sceneloc.features import FeatureBank


def random_tree(depth, n_features, rng):
    """Arrays of a complete binary tree with plausible split thresholds."""
    n = 2 ** (depth + 1) - 1
    feature = np.full(n, -1, dtype=np.int32)
    thresh = np.zeros(n)
    left = np.full(n, -1, dtype=np.int32)
    right = np.full(n, -1, dtype=np.int32)
    internal = 2**depth - 1
    feature[:internal] = rng.integers(0, n_features, internal)
    thresh[:internal] = rng.integers(-80, 80, internal) + 0.5
    left[:internal] = 2 * np.arange(internal) + 1
    right[:internal] = 2 * np.arange(internal) + 2
    return feature, thresh, left, right


def build_cases(n_pixels, rng):
    bank = FeatureBank(size=1000, max_radius=16, rng_seed=0)
    cols = bank.columns()
    images = rng.integers(0, 256, (8, 96, 128, 3), dtype=np.uint8)
    fi = rng.integers(0, 8, n_pixels)
    px = rng.integers(0, 128, n_pixels)
    py = rng.integers(0, 96, n_pixels)
    x = kernels.feature_matrix(images, fi, px, py, *cols)
    feature, thresh, left, right = random_tree(10, 1000, rng)

    resp = x[:, :256].astype(np.float32)
    targets = rng.uniform(0, 2, (n_pixels, 3))
    cand_thresh = rng.integers(-80, 80, 256) + 0.5

    samples = rng.uniform(0, 2, (500, 3))
    seeds = samples[:64]

    preds = rng.uniform(0, 2, (n_pixels, 5, 3))

    n_hyp = 128
    rots = np.tile(np.eye(3), (n_hyp, 1, 1))
    trans = rng.uniform(-1, 1, (n_hyp, 3))
    pts = rng.uniform(0, 2, (6000, 3))
    u = rng.uniform(0, 128, 6000)
    v = rng.uniform(0, 96, 6000)

    return [
        ("feature_matrix", lambda: kernels.feature_matrix(images, fi, px, py, *cols)),
        ("route_by_features", lambda: kernels.route_by_features(x, feature, thresh, left, right)),
        ("route_by_image", lambda: kernels.route_by_image(
            images[0], px, py, feature, thresh, left, right, *cols)),
        ("split_scores", lambda: kernels.split_scores(resp, targets, cand_thresh, 5)),
        ("meanshift_seeds", lambda: kernels.meanshift_seeds(samples, seeds, 0.05, 1e-4, 50)),
        ("pgm_batch", lambda: kernels.pgm_batch(preds, 10, 10, 0.025, 1e-9)),
        ("pose_inlier_counts", lambda: kernels.pose_inlier_counts(
            rots, trans, pts, u, v, 113.0, 113.0, 64.0, 48.0, 10.0)),
    ]


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--pixels", type=int, default=20000)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    cases = build_cases(args.pixels, rng)

    results = {}
    backends = ["numpy"]
    try:
        kernels.set_backend("numba")
        backends.append("numba")
    except ValueError:
        print("numba not importable; timing the numpy backend only\n")

    for backend in backends:
        kernels.set_backend(backend)
        kernels.warmup()
        for name, fn in cases:
            fn()  # one untimed pass per backend, fair cache state
            results[(name, backend)] = best_of(fn, args.repeats)

    width = max(len(name) for name, _ in cases)
    header = f"{'kernel'.ljust(width)}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, _ in cases:
        np_ms = 1e3 * results[(name, "numpy")]
        if ("numba" in backends):
            nb_ms = 1e3 * results[(name, "numba")]
            ratio = f"{np_ms / nb_ms:7.1f}x"
            print(f"{name.ljust(width)}  {np_ms:9.2f}ms  {nb_ms:9.2f}ms  {ratio}")
        else:
            print(f"{name.ljust(width)}  {np_ms:9.2f}ms  {'-':>10}  {'-':>8}")
    print(f"\nbest of {args.repeats} runs; backend also selectable via SCENELOC_BACKEND")


if __name__ == "__main__":
    main()

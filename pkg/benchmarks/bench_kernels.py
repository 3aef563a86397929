"""Compare the numba kernels with their numpy fallbacks.

Both paths live in the same process: every kernel takes ``use_numba``
explicitly, so the env flag does not matter here. The first numba call
(compilation, or cache load) is timed separately as ``warmup``.

    python3 benchmarks/bench_kernels.py --repeat 5
"""
import argparse
import time

import numpy as np

from nfseg.candidates import label_array
from nfseg.forest import ForestParams, train_forest_arrays
from nfseg.radiomics import DIRECTIONS, glcm_counts, max_pairwise_sq_distance


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    mask = rng.random((64, 128, 128)) < 0.3
    q = rng.integers(-1, 32, size=(12, 40, 40)).astype(np.int64)
    pts = rng.normal(size=(3000, 3))
    X = rng.normal(size=(400, 20))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(np.int64)
    params = ForestParams(n_trees=50, seed=0)
    model = train_forest_arrays(X, y, [f"f{i}" for i in range(20)], params, use_numba=True)
    Xp = rng.normal(size=(20000, 20))
    return {
        "connected components 64x128x128": lambda nb: label_array(mask, use_numba=nb),
        "glcm counts 12x40x40, 13 dirs": lambda nb: glcm_counts(q, DIRECTIONS, 32, use_numba=nb),
        "max diameter, 3000 points": lambda nb: max_pairwise_sq_distance(pts, use_numba=nb),
        "forest growth 50 trees, 400x20": lambda nb: train_forest_arrays(
            X, y, [f"f{i}" for i in range(20)], params, use_numba=nb
        ),
        "forest predict 20000 rows": lambda nb: model.predict_matrix(Xp, use_numba=nb),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':36s} {'warmup':>9s} {'numba':>9s} {'numpy':>9s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t0 = time.perf_counter()
        fn(True)
        warm = time.perf_counter() - t0
        t_nb = _best(lambda: fn(True), args.repeat)
        t_np = _best(lambda: fn(False), args.repeat)
        print(f"{name:36s} {warm:9.4f} {t_nb:9.4f} {t_np:9.4f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()

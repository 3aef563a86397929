import math
from collections import deque
from itertools import product

import numpy as np
import pytest

from nfseg.phantom import PhantomConfig, generate_phantom
from nfseg.pipeline import PipelineConfig, ScanInputs, process_scan, train_classifier

NEIGHBOURS_26 = [d for d in product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]


def flood_fill_labels(mask):
    """Plain BFS labelling, ids in order of first row-major foreground voxel."""
    mask = np.asarray(mask, bool)
    out = np.zeros(mask.shape, np.int64)
    n = 0
    for start in zip(*np.nonzero(mask)):
        if out[start]:
            continue
        n += 1
        out[start] = n
        q = deque([start])
        while q:
            i, j, k = q.popleft()
            for di, dj, dk in NEIGHBOURS_26:
                a, b, c = i + di, j + dj, k + dk
                if 0 <= a < mask.shape[0] and 0 <= b < mask.shape[1] and 0 <= c < mask.shape[2]:
                    if mask[a, b, c] and not out[a, b, c]:
                        out[a, b, c] = n
                        q.append((a, b, c))
    return out, n


def scan_inputs(bundle, scan_id):
    return ScanInputs(scan_id, bundle.image, bundle.anatomy_raw, bundle.ensemble, bundle.gt_tumors)


TRAIN_SEEDS = range(1000, 1010)


@pytest.fixture(scope="session")
def trained_bundle():
    """Region classifiers trained on ten phantoms with five textured FP blobs each."""
    cfg = PipelineConfig(classify=False)
    mats = []
    for s in TRAIN_SEEDS:
        b = generate_phantom(PhantomConfig(seed=s, fp_blob_count=5))
        mats.append(process_scan(scan_inputs(b, f"train_{s}"), cfg).features)
    bundle, report = train_classifier(mats, PipelineConfig(seed=0))
    return bundle


@pytest.fixture(scope="session")
def fp_phantom():
    return generate_phantom(PhantomConfig(seed=7, fp_blob_count=5))


def informative_dataset(seed, n=200, n_informative=3, n_noise=20):
    """Gaussian features; the informative ones shift by 3 sd with the class.

    Returns (X, y, names, informative_names). Informative columns sit at
    random positions so column order gives them no head start.
    """
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    p = n_informative + n_noise
    X = rng.normal(size=(n, p))
    cols = rng.permutation(p)[:n_informative]
    X[:, cols] += 3.0 * y[:, None]
    names = [f"f{i:02d}" for i in range(p)]
    return X, y, names, sorted(names[c] for c in cols)


def separable_dataset(seed, n=200, n_noise=4):
    """Class decided by feature 0 with a gap between the classes."""
    rng = np.random.default_rng(seed)
    y = rng.permutation(np.arange(n) % 2)
    x0 = np.where(y == 1, rng.uniform(0.55, 1.0, n), rng.uniform(0.0, 0.45, n))
    X = np.column_stack([x0, rng.normal(size=(n, n_noise))])
    return X, y, [f"feature_{i}" for i in range(n_noise + 1)]


def _percentile(sorted_vals, q):
    # linear interpolation between closest ranks
    pos = (len(sorted_vals) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(sorted_vals) - 1)
    return sorted_vals[lo] + (sorted_vals[hi] - sorted_vals[lo]) * (pos - lo)


def first_order_oracle(values, voxel_volume):
    v = sorted(float(x) for x in values)
    n = len(v)
    mean = math.fsum(v) / n
    m2 = math.fsum((x - mean) ** 2 for x in v) / n
    m3 = math.fsum((x - mean) ** 3 for x in v) / n
    m4 = math.fsum((x - mean) ** 4 for x in v) / n
    energy = math.fsum(x * x for x in v)
    lo, hi = v[0], v[-1]
    counts = [0] * 32
    for x in v:
        b = 0 if hi == lo else min(int((x - lo) / (hi - lo) * 32), 31)
        counts[b] += 1
    probs = [c / n for c in counts if c]
    return {
        "mean": mean,
        "median": _percentile(v, 50),
        "min": lo,
        "max": hi,
        "range": hi - lo,
        "variance": m2,
        "std": math.sqrt(m2),
        "skewness": m3 / m2**1.5 if m2 > 0 else 0.0,
        "kurtosis": m4 / m2**2 if m2 > 0 else 0.0,
        "energy": energy,
        "total_energy": energy * voxel_volume,
        "root_mean_square": math.sqrt(energy / n),
        "mean_absolute_deviation": math.fsum(abs(x - mean) for x in v) / n,
        "interquartile_range": _percentile(v, 75) - _percentile(v, 25),
        "p10": _percentile(v, 10),
        "p90": _percentile(v, 90),
        "entropy": -math.fsum(p * math.log2(p) for p in probs),
        "uniformity": math.fsum(p * p for p in probs),
    }


def face_count_area(voxels, spacing):
    """Surface area by visiting each voxel's six faces and keeping the exposed ones."""
    occupied = {tuple(v) for v in np.asarray(voxels).tolist()}
    face = (spacing[1] * spacing[2], spacing[0] * spacing[2], spacing[0] * spacing[1])
    area = 0.0
    for v in occupied:
        for ax in range(3):
            for step in (-1, 1):
                nb = list(v)
                nb[ax] += step
                if tuple(nb) not in occupied:
                    area += face[ax]
    return area


def digital_ball(radius):
    r = int(radius)
    g = np.mgrid[-r:r + 1, -r:r + 1, -r:r + 1].reshape(3, -1).T
    return g[(g**2).sum(axis=1) <= radius**2] + r


def wilcoxon_enumeration_p(a, b):
    """Two-sided exact signed-rank p by listing all 2^n sign assignments.

    Zero differences are dropped and tied |d| share their average rank.
    Ranks are multiples of 1/2, so every float sum below is exact; the
    tail counts are integers and the final quotient is correctly rounded.
    """
    d = [x - y for x, y in zip(a, b) if x != y]
    n = len(d)
    if n == 0:
        return 1.0
    mags = sorted(abs(x) for x in d)
    ranks = []
    for x in d:
        first = mags.index(abs(x))
        last = len(mags) - 1 - mags[::-1].index(abs(x))
        ranks.append((first + last + 2) / 2)
    observed = sum(r for r, x in zip(ranks, d) if x > 0)
    signs = np.array(list(product((0, 1), repeat=n)), dtype=np.float64)
    totals = signs @ np.array(ranks)
    lower = int((totals <= observed).sum())
    upper = int((totals >= observed).sum())
    return min(1.0, 2 * min(lower, upper) / 2**n)

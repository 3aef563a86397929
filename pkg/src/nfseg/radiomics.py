"""Per-candidate radiomic features: first-order, shape and GLCM texture.

The catalog is fixed and ordered (see ``FEATURE_NAMES``). Voxel sets are
canonicalised (sorted) before any reduction so every feature is
independent of the order in which voxels are enumerated.
"""
from __future__ import annotations

import logging
import math
from typing import Dict, List, Sequence

import numpy as np

from ._jit import USE_NUMBA, njit
from .volume import ImageVolume, VolumeGeometry

log = logging.getLogger(__name__)

FIRST_ORDER_NAMES = (
    "mean",
    "median",
    "min",
    "max",
    "range",
    "variance",
    "std",
    "skewness",
    "kurtosis",
    "energy",
    "total_energy",
    "root_mean_square",
    "mean_absolute_deviation",
    "interquartile_range",
    "p10",
    "p90",
    "entropy",
    "uniformity",
)
SHAPE_NAMES = (
    "volume_mm3",
    "surface_area_mm2",
    "surface_to_volume_ratio",
    "sphericity",
    "max_3d_diameter",
    "pca_major_axis",
    "pca_minor_axis",
    "pca_least_axis",
    "elongation",
    "flatness",
)
GLCM_NAMES = (
    "joint_energy",
    "contrast",
    "dissimilarity",
    "homogeneity",
    "joint_entropy",
    "correlation",
)
FEATURE_NAMES = (
    tuple(f"firstorder_{n}" for n in FIRST_ORDER_NAMES)
    + tuple(f"shape_{n}" for n in SHAPE_NAMES)
    + tuple(f"glcm_{n}" for n in GLCM_NAMES)
)

HISTOGRAM_BINS = 32
GLCM_BINS = 32

# the 13 unique 3D neighbour directions (lexicographically positive)
DIRECTIONS = np.array(
    [
        (di, dj, dk)
        for di in (-1, 0, 1)
        for dj in (-1, 0, 1)
        for dk in (-1, 0, 1)
        if (di, dj, dk) > (0, 0, 0)
    ],
    dtype=np.int64,
)

FeatureVector = Dict[str, float]


class NoCooccurrenceError(ValueError):
    pass


def _canonical_voxels(voxels: np.ndarray) -> np.ndarray:
    voxels = np.asarray(voxels, dtype=np.intp).reshape(-1, 3)
    if voxels.shape[0] == 0:
        raise ValueError("empty candidate")
    order = np.lexsort((voxels[:, 2], voxels[:, 1], voxels[:, 0]))
    return voxels[order]


def fixed_width_bins(values: np.ndarray, bins: int, lo: float, hi: float) -> np.ndarray:
    """Bin index 0..bins-1 over [lo, hi]; a degenerate range maps to bin 0."""
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _voxels_of(candidate) -> np.ndarray:
    return getattr(candidate, "voxel_indices", candidate)


# --- first order -------------------------------------------------------------

def first_order_features(candidate, image: ImageVolume) -> FeatureVector:
    """Intensity statistics over the candidate voxels.

    Moments are population moments; kurtosis is the plain (non-excess)
    fourth standardised moment. Constant regions get skewness and
    kurtosis 0. Entropy is in bits over 32 fixed-width bins spanning the
    region's own min..max.
    """
    vox = _canonical_voxels(_voxels_of(candidate))
    x = np.sort(image.data[vox[:, 0], vox[:, 1], vox[:, 2]].astype(np.float64))
    n = x.size
    mean = x.sum() / n
    d = x - mean
    m2 = (d * d).sum() / n
    m3 = (d**3).sum() / n
    m4 = (d**4).sum() / n
    if m2 > 0:
        skew = m3 / m2**1.5
        kurt = m4 / (m2 * m2)
    else:
        skew = kurt = 0.0
    energy = (x * x).sum()
    p25, p75, p10, p90, median = np.percentile(x, [25, 75, 10, 90, 50])
    counts = np.bincount(fixed_width_bins(x, HISTOGRAM_BINS, x[0], x[-1]), minlength=HISTOGRAM_BINS)
    p = counts[counts > 0] / n
    entropy = float(-(p * np.log2(p)).sum()) if p.size > 1 else 0.0
    vals = {
        "mean": mean,
        "median": median,
        "min": x[0],
        "max": x[-1],
        "range": x[-1] - x[0],
        "variance": m2,
        "std": math.sqrt(m2),
        "skewness": skew,
        "kurtosis": kurt,
        "energy": energy,
        "total_energy": energy * image.geometry.voxel_volume,
        "root_mean_square": math.sqrt(energy / n),
        "mean_absolute_deviation": np.abs(d).sum() / n,
        "interquartile_range": p75 - p25,
        "p10": p10,
        "p90": p90,
        "entropy": entropy,
        "uniformity": float((p * p).sum()),
    }
    return {f"firstorder_{k}": float(vals[k]) for k in FIRST_ORDER_NAMES}


# --- shape ------------------------------------------------------------------

@njit
def _max_pairwise_numba(pts):
    best = 0.0
    n = pts.shape[0]
    for a in range(n):
        for b in range(a + 1, n):
            dx = pts[a, 0] - pts[b, 0]
            dy = pts[a, 1] - pts[b, 1]
            dz = pts[a, 2] - pts[b, 2]
            d = dx * dx + dy * dy + dz * dz
            if d > best:
                best = d
    return best


def _max_pairwise_numpy(pts, chunk=512):
    best = 0.0
    for s in range(0, len(pts), chunk):
        blk = pts[s : s + chunk]
        d = ((blk[:, None, :] - pts[None, s:, :]) ** 2).sum(axis=2)
        best = max(best, float(d.max(initial=0.0)))
    return best


def max_pairwise_sq_distance(pts: np.ndarray, use_numba: bool | None = None) -> float:
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if use_numba is None:
        use_numba = USE_NUMBA
    return float(_max_pairwise_numba(pts) if use_numba else _max_pairwise_numpy(pts))


def _crop_mask(vox: np.ndarray, pad: int = 1):
    lo = vox.min(axis=0)
    shape = vox.max(axis=0) - lo + 1 + 2 * pad
    mask = np.zeros(tuple(shape), dtype=bool)
    local = vox - lo + pad
    mask[local[:, 0], local[:, 1], local[:, 2]] = True
    return mask, lo


def shape_features(candidate, geometry: VolumeGeometry) -> FeatureVector:
    """Voxel-model shape descriptors in physical units.

    Surface area counts exposed voxel faces. PCA axis lengths are
    4*sqrt(eigenvalue) of the population covariance of voxel-centre
    coordinates; a single voxel has elongation = flatness = 1.
    """
    vox = _canonical_voxels(_voxels_of(candidate))
    sp = np.asarray(geometry.spacing, dtype=np.float64)
    n = vox.shape[0]
    volume = n * float(sp.prod())
    mask, _ = _crop_mask(vox)
    face_area = (sp[1] * sp[2], sp[0] * sp[2], sp[0] * sp[1])
    area = 0.0
    for ax in range(3):
        area += np.count_nonzero(np.diff(mask, axis=ax)) * face_area[ax]
    sphericity = math.pi ** (1.0 / 3.0) * (6.0 * volume) ** (2.0 / 3.0) / area

    # only voxels with an exposed face can be convex-hull vertices
    interior = (
        mask[1:-1, 1:-1, 1:-1]
        & mask[:-2, 1:-1, 1:-1] & mask[2:, 1:-1, 1:-1]
        & mask[1:-1, :-2, 1:-1] & mask[1:-1, 2:, 1:-1]
        & mask[1:-1, 1:-1, :-2] & mask[1:-1, 1:-1, 2:]
    )
    local = vox - vox.min(axis=0)
    boundary = vox[~interior[local[:, 0], local[:, 1], local[:, 2]]]
    diameter = math.sqrt(max_pairwise_sq_distance(boundary * sp))

    coords = vox * sp
    centred = coords - coords.mean(axis=0)
    cov = centred.T @ centred / n
    lam = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    if lam[0] > 0:
        elong = math.sqrt(lam[1] / lam[0])
        flat = math.sqrt(lam[2] / lam[0])
    else:
        elong = flat = 1.0
    vals = {
        "volume_mm3": volume,
        "surface_area_mm2": area,
        "surface_to_volume_ratio": area / volume,
        "sphericity": sphericity,
        "max_3d_diameter": diameter,
        "pca_major_axis": 4.0 * math.sqrt(lam[0]),
        "pca_minor_axis": 4.0 * math.sqrt(lam[1]),
        "pca_least_axis": 4.0 * math.sqrt(lam[2]),
        "elongation": elong,
        "flatness": flat,
    }
    return {f"shape_{k}": float(vals[k]) for k in SHAPE_NAMES}


# --- GLCM -------------------------------------------------------------------

@njit
def _glcm_counts_numba(q, offsets, bins):
    ni, nj, nk = q.shape
    out = np.zeros((offsets.shape[0], bins, bins), dtype=np.int64)
    for d in range(offsets.shape[0]):
        oi = offsets[d, 0]
        oj = offsets[d, 1]
        ok = offsets[d, 2]
        for i in range(ni):
            a = i + oi
            if a < 0 or a >= ni:
                continue
            for j in range(nj):
                b = j + oj
                if b < 0 or b >= nj:
                    continue
                for k in range(nk):
                    c = k + ok
                    if c < 0 or c >= nk:
                        continue
                    g1 = q[i, j, k]
                    g2 = q[a, b, c]
                    if g1 >= 0 and g2 >= 0:
                        out[d, g1, g2] += 1
    return out


def _shifted_pair(q, off):
    sl_a, sl_b = [], []
    for o, n in zip(off, q.shape):
        if o >= 0:
            sl_a.append(slice(0, n - o))
            sl_b.append(slice(o, n))
        else:
            sl_a.append(slice(-o, n))
            sl_b.append(slice(0, n + o))
    return q[tuple(sl_a)], q[tuple(sl_b)]


def _glcm_counts_numpy(q, offsets, bins):
    out = np.zeros((len(offsets), bins, bins), dtype=np.int64)
    for d, off in enumerate(offsets):
        a, b = _shifted_pair(q, off)
        ok = (a >= 0) & (b >= 0)
        out[d] = np.bincount(a[ok] * bins + b[ok], minlength=bins * bins).reshape(bins, bins)
    return out


def glcm_counts(q: np.ndarray, offsets: np.ndarray, bins: int, use_numba: bool | None = None) -> np.ndarray:
    """Directed co-occurrence counts per offset; ``q`` is -1 outside the region."""
    q = np.ascontiguousarray(q, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if q.size and q.max() >= bins:
        raise ValueError(f"gray level {int(q.max())} outside [0, {bins})")
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        return _glcm_counts_numba(q, offsets, bins)
    return _glcm_counts_numpy(q, offsets, bins)


def quantized_region(vox: np.ndarray, image: ImageVolume, bins: int) -> np.ndarray:
    vals = image.data[vox[:, 0], vox[:, 1], vox[:, 2]].astype(np.float64)
    lo = vox.min(axis=0)
    shape = vox.max(axis=0) - lo + 1
    q = np.full(tuple(shape), -1, dtype=np.int64)
    local = vox - lo
    q[local[:, 0], local[:, 1], local[:, 2]] = fixed_width_bins(vals, bins, vals.min(), vals.max())
    return q


def glcm_matrices(candidate, image: ImageVolume, bins: int = GLCM_BINS, distance: int = 1) -> List[np.ndarray]:
    """Symmetric, normalised co-occurrence matrices for directions with pairs."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if distance < 1:
        raise ValueError("distance must be >= 1")
    vox = _canonical_voxels(_voxels_of(candidate))
    q = quantized_region(vox, image, bins)
    counts = glcm_counts(q, DIRECTIONS * distance, bins)
    mats = []
    for c in counts:
        sym = (c + c.T).astype(np.float64)
        total = sym.sum()
        if total > 0:
            mats.append(sym / total)
    if not mats:
        raise NoCooccurrenceError("no co-occurrence pairs")
    return mats


def _glcm_scalars(P: np.ndarray) -> Dict[str, float]:
    bins = P.shape[0]
    g = np.arange(1, bins + 1, dtype=np.float64)
    i, j = np.meshgrid(g, g, indexing="ij")
    diff = i - j
    nz = P > 0
    mu = (i * P).sum()
    var = ((i - mu) ** 2 * P).sum()
    if var > 0:
        corr = ((i - mu) * (j - mu) * P).sum() / var
    else:
        corr = 1.0
    return {
        "joint_energy": (P * P).sum(),
        "contrast": (diff * diff * P).sum(),
        "dissimilarity": (np.abs(diff) * P).sum(),
        "homogeneity": (P / (1.0 + diff * diff)).sum(),
        "joint_entropy": -(P[nz] * np.log2(P[nz])).sum(),
        "correlation": corr,
    }


def glcm_features(candidate, image: ImageVolume, bins: int = GLCM_BINS, distance: int = 1) -> FeatureVector:
    """Texture features averaged over the directions that have pairs.

    Intensities are quantised to ``bins`` fixed-width bins over the
    candidate's own range; only pairs with both voxels in the candidate
    count. Correlation of a single-level matrix is defined as 1.
    """
    mats = glcm_matrices(candidate, image, bins, distance)
    per_dir = [_glcm_scalars(P) for P in mats]
    return {
        f"glcm_{k}": float(np.mean([d[k] for d in per_dir])) for k in GLCM_NAMES
    }


_DEGENERATE_GLCM = {
    "glcm_joint_energy": 1.0,
    "glcm_contrast": 0.0,
    "glcm_dissimilarity": 0.0,
    "glcm_homogeneity": 1.0,
    "glcm_joint_entropy": 0.0,
    "glcm_correlation": 1.0,
}


def extract_features(candidate, image: ImageVolume, bins: int = GLCM_BINS, distance: int = 1) -> FeatureVector:
    """Full catalog for one candidate, in catalog order.

    Candidates too small to form any pair at ``distance`` get the
    single-cell texture values so matrices stay rectangular.
    """
    feats = first_order_features(candidate, image)
    feats.update(shape_features(candidate, image.geometry))
    try:
        feats.update(glcm_features(candidate, image, bins, distance))
    except NoCooccurrenceError:
        log.warning("candidate %s has no co-occurrence pairs; using single-cell texture values",
                    getattr(candidate, "id", "?"))
        feats.update(_DEGENERATE_GLCM)
    return {name: feats[name] for name in FEATURE_NAMES}


def feature_rows(candidates: Sequence, image: ImageVolume, bins: int = GLCM_BINS, distance: int = 1) -> np.ndarray:
    rows = [list(extract_features(c, image, bins, distance).values()) for c in candidates]
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), len(FEATURE_NAMES))

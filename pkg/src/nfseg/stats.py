"""Pearson correlation and the Wilcoxon signed-rank test."""
from __future__ import annotations

import math
from typing import Sequence, Tuple

import numpy as np
from scipy import stats as sps
from scipy.stats import rankdata

EXACT_MAX_N = 25


def pearson_r(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """Sample Pearson r and its two-sided p-value (t distribution, n - 2 df)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = (dx * dx).sum()
    syy = (dy * dy).sum()
    if sxx == 0 or syy == 0:
        raise ValueError("constant input")
    r = float((dx * dy).sum() / math.sqrt(sxx * syy))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = float(2.0 * sps.t.sf(abs(t), n - 2))
    return r, min(1.0, p)


def signed_rank_null_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Number of sign assignments giving each value of 2*T+.

    Ranks are doubled so average ranks of ties stay integral. Entry ``s``
    counts assignments whose positive doubled ranks sum to ``s``.
    """
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def _exact_p(doubled: np.ndarray, t2: int) -> float:
    counts = signed_rank_null_counts(doubled)
    total = int(sum(counts))
    lower = int(sum(counts[: t2 + 1]))
    upper = int(sum(counts[t2:]))
    # integer arithmetic up to the final division keeps results exact
    return min(1.0, 2 * min(lower, upper) / total)


def wilcoxon_signed_rank(
    a: Sequence[float], b: Sequence[float], n_comparisons: int = 1, mode: str = "auto"
) -> Tuple[float, float]:
    """Paired two-sided Wilcoxon signed-rank test with Bonferroni adjustment.

    Zero differences are dropped and tied absolute differences get
    average ranks. ``mode="auto"`` uses the exact null distribution for
    up to 25 non-zero pairs and the continuity-corrected normal
    approximation (with tie correction) above that. Returns
    ``(p_raw, p_bonferroni)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("samples must be paired 1-D sequences of equal length")
    if n_comparisons < 1:
        raise ValueError("n_comparisons must be >= 1")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0, 1.0
    ranks = rankdata(np.abs(d), method="average")
    doubled = np.rint(2 * ranks).astype(np.int64)
    t2 = int(doubled[d > 0].sum())
    use_exact = mode == "exact" or (mode == "auto" and n <= EXACT_MAX_N)
    if mode not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown mode {mode!r}")
    if use_exact:
        p = _exact_p(doubled, t2)
    else:
        t_plus = t2 / 2.0
        mu = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
        if var <= 0:
            return 1.0, 1.0
        z = max(abs(t_plus - mu) - 0.5, 0.0) / math.sqrt(var)
        p = min(1.0, float(2.0 * sps.norm.sf(z)))
    return p, min(1.0, p * n_comparisons)

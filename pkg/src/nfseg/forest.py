"""Random-forest classifier and region-routed candidate classification.

Trees are CART with Gini impurity, grown on bootstrap resamples with a
random feature subset per node. All randomness for a tree (bootstrap
draw and per-node feature keys) comes from a generator seeded with
``(seed, tree_index)`` and is drawn before growing, so the numba and
numpy builders see identical inputs and grow identical trees.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from ._jit import USE_NUMBA, njit
from .anatomy import AnatomicalRegion

SCHEMA_VERSION = 1
_MIN_DECREASE = 1e-12


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    max_depth: int = 0  # 0 = unlimited
    min_samples_leaf: int = 2
    mtry: Optional[int] = None  # None = ceil(sqrt(p))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ForestError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ForestError("min_samples_leaf must be >= 1")
        if self.max_depth < 0:
            raise ForestError("max_depth must be >= 0")
        if self.mtry is not None and self.mtry < 1:
            raise ForestError("mtry must be >= 1")

    def resolved_mtry(self, p: int) -> int:
        m = int(math.ceil(math.sqrt(p))) if self.mtry is None else int(self.mtry)
        if not 1 <= m <= p:
            raise ForestError(f"mtry={m} outside [1, {p}]")
        return m


class Tree(NamedTuple):
    feature: np.ndarray  # int64, -1 at leaves
    threshold: np.ndarray  # float64; go left when x <= threshold
    left: np.ndarray  # int64
    right: np.ndarray  # int64
    count0: np.ndarray  # float64 bootstrap class counts per node
    count1: np.ndarray


# --- tree growing -------------------------------------------------------------

@njit
def _grow_numba(X, y, keys, mtry, min_leaf, max_depth):
    n, p = X.shape
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    count0 = np.zeros(cap, dtype=np.float64)
    count1 = np.zeros(cap, dtype=np.float64)
    depth = np.zeros(cap, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    stop = np.zeros(cap, dtype=np.int64)

    idx = np.arange(n)
    stack = np.zeros(cap, dtype=np.int64)
    sp = 0
    n_nodes = 1
    start[0] = 0
    stop[0] = n
    stack[0] = 0
    sp = 1
    vals = np.empty(n, dtype=np.float64)
    labs = np.empty(n, dtype=np.int64)
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        e = stop[node]
        m = e - s
        c1 = 0.0
        for t in range(s, e):
            c1 += y[idx[t]]
        c0 = m - c1
        count0[node] = c0
        count1[node] = c1
        if c0 == 0.0 or c1 == 0.0 or m < 2 * min_leaf:
            continue
        if max_depth > 0 and depth[node] >= max_depth:
            continue
        parent = m - (c0 * c0 + c1 * c1) / m
        order = np.argsort(keys[node])
        feats = np.sort(order[:mtry])
        best_score = np.inf
        best_f = -1
        best_thr = 0.0
        for fi in range(mtry):
            f = feats[fi]
            for t in range(m):
                vals[t] = X[idx[s + t], f]
                labs[t] = y[idx[s + t]]
            srt = np.argsort(vals[:m], kind="mergesort")
            l1 = 0.0
            for t in range(m - 1):
                l1 += labs[srt[t]]
                nl = t + 1.0
                if t + 1 < min_leaf or m - t - 1 < min_leaf:
                    continue
                v_lo = vals[srt[t]]
                v_hi = vals[srt[t + 1]]
                if not v_lo < v_hi:
                    continue
                nr = m - nl
                l0 = nl - l1
                r1 = c1 - l1
                r0 = nr - r1
                score = (nl - (l0 * l0 + l1 * l1) / nl) + (nr - (r0 * r0 + r1 * r1) / nr)
                if score < best_score:
                    best_score = score
                    best_f = f
                    thr = (v_lo + v_hi) / 2.0
                    if thr >= v_hi:
                        thr = v_lo
                    best_thr = thr
        if best_f < 0 or parent - best_score <= _MIN_DECREASE * m:
            continue
        # stable partition of idx[s:e]
        buf = idx[s:e].copy()
        w = s
        for t in range(m):
            if X[buf[t], best_f] <= best_thr:
                idx[w] = buf[t]
                w += 1
        mid = w
        for t in range(m):
            if not X[buf[t], best_f] <= best_thr:
                idx[w] = buf[t]
                w += 1
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lc
        right[node] = rc
        start[lc] = s
        stop[lc] = mid
        start[rc] = mid
        stop[rc] = e
        depth[lc] = depth[node] + 1
        depth[rc] = depth[node] + 1
        stack[sp] = rc
        stack[sp + 1] = lc
        sp += 2
    return (
        feature[:n_nodes],
        threshold[:n_nodes],
        left[:n_nodes],
        right[:n_nodes],
        count0[:n_nodes],
        count1[:n_nodes],
    )


def _best_split_numpy(x, y, c1_total, min_leaf):
    m = x.size
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ys = y[order].astype(np.float64)
    l1 = np.cumsum(ys)[:-1]
    nl = np.arange(1, m, dtype=np.float64)
    nr = m - nl
    l0 = nl - l1
    r1 = c1_total - l1
    r0 = nr - r1
    valid = (xs[:-1] < xs[1:]) & (nl >= min_leaf) & (nr >= min_leaf)
    if not valid.any():
        return np.inf, 0.0
    score = (nl - (l0 * l0 + l1 * l1) / nl) + (nr - (r0 * r0 + r1 * r1) / nr)
    score = np.where(valid, score, np.inf)
    t = int(np.argmin(score))  # first minimum
    v_lo, v_hi = xs[t], xs[t + 1]
    thr = (v_lo + v_hi) / 2.0
    if thr >= v_hi:
        thr = v_lo
    return float(score[t]), float(thr)


def _grow_numpy(X, y, keys, mtry, min_leaf, max_depth):
    n = X.shape[0]
    feature, threshold, left, right, count0, count1 = [], [], [], [], [], []
    members = {0: np.arange(n)}
    depth = {0: 0}

    def new_node():
        for arr in (feature, left, right):
            arr.append(-1)
        threshold.append(0.0)
        count0.append(0.0)
        count1.append(0.0)
        return len(feature) - 1

    new_node()
    stack = [0]
    while stack:
        node = stack.pop()
        rows = members.pop(node)
        m = rows.size
        c1 = float(y[rows].sum())
        c0 = m - c1
        count0[node], count1[node] = c0, c1
        if c0 == 0.0 or c1 == 0.0 or m < 2 * min_leaf:
            continue
        if max_depth > 0 and depth[node] >= max_depth:
            continue
        parent = m - (c0 * c0 + c1 * c1) / m
        feats = np.sort(np.argsort(keys[node])[:mtry])
        best = (np.inf, -1, 0.0)
        for f in feats:
            score, thr = _best_split_numpy(X[rows, f], y[rows], c1, min_leaf)
            if score < best[0]:
                best = (score, int(f), thr)
        score, f, thr = best
        if f < 0 or parent - score <= _MIN_DECREASE * m:
            continue
        go_left = X[rows, f] <= thr
        lc, rc = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, thr, lc, rc
        members[lc], members[rc] = rows[go_left], rows[~go_left]
        depth[lc] = depth[rc] = depth[node] + 1
        stack.append(rc)
        stack.append(lc)
    return (
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(count0, dtype=np.float64),
        np.asarray(count1, dtype=np.float64),
    )


def tree_randomness(seed: int, tree_index: int, n: int, p: int, bootstrap: bool):
    """Bootstrap rows and per-node feature keys for one tree."""
    rng = np.random.default_rng([int(seed), int(tree_index)])
    rows = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
    keys = rng.random((2 * n + 1, p))
    return rows, keys


def grow_tree(X, y, rows, keys, mtry, min_leaf, max_depth, use_numba: bool | None = None) -> Tree:
    Xb = np.ascontiguousarray(X[rows], dtype=np.float64)
    yb = np.ascontiguousarray(y[rows], dtype=np.int64)
    if use_numba is None:
        use_numba = USE_NUMBA
    grow = _grow_numba if use_numba else _grow_numpy
    return Tree(*grow(Xb, yb, keys, int(mtry), int(min_leaf), int(max_depth)))


# --- prediction -------------------------------------------------------------

@njit
def _predict_numba(X, feature, threshold, left, right, frac, roots):
    n = X.shape[0]
    n_trees = roots.shape[0]
    out = np.zeros(n, dtype=np.float64)
    for i in range(n):
        acc = 0.0
        for t in range(n_trees):
            node = roots[t]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            acc += frac[node]
        out[i] = acc / n_trees
    return out


def _predict_numpy(X, feature, threshold, left, right, frac, roots):
    n = X.shape[0]
    acc = np.zeros(n, dtype=np.float64)
    rows = np.arange(n)
    for root in roots:
        node = np.full(n, root, dtype=np.int64)
        inner = feature[node] >= 0
        while inner.any():
            cur = node[inner]
            go_left = X[rows[inner], feature[cur]] <= threshold[cur]
            node[inner] = np.where(go_left, left[cur], right[cur])
            inner = feature[node] >= 0
        acc += frac[node]
    return acc / len(roots)


@dataclass
class RandomForestModel:
    trees: List[Tree]
    feature_names: List[str]
    params: ForestParams
    region: Optional[AnatomicalRegion] = None
    metadata: Dict = field(default_factory=dict)
    _flat: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.trees) != self.params.n_trees:
            raise ForestError("tree count does not match params.n_trees")
        p = len(self.feature_names)
        for t in self.trees:
            if np.any(t.feature >= p):
                raise ForestError("tree references a feature index beyond feature_names")
            leaves = t.feature < 0
            if np.any(t.count0[leaves] + t.count1[leaves] <= 0):
                raise ForestError("leaf with no samples")

    def flat(self):
        if self._flat is None:
            offs = np.cumsum([0] + [len(t.feature) for t in self.trees])
            cat = lambda attr, shift=False: np.concatenate(  # noqa: E731
                [
                    np.where(getattr(t, attr) >= 0, getattr(t, attr) + o, -1) if shift else getattr(t, attr)
                    for t, o in zip(self.trees, offs[:-1])
                ]
            )
            c0, c1 = cat("count0"), cat("count1")
            tot = c0 + c1
            frac = np.divide(c1, tot, out=np.zeros_like(tot), where=tot > 0)
            self._flat = (
                np.ascontiguousarray(cat("feature"), dtype=np.int64),
                np.ascontiguousarray(cat("threshold"), dtype=np.float64),
                np.ascontiguousarray(cat("left", True), dtype=np.int64),
                np.ascontiguousarray(cat("right", True), dtype=np.int64),
                np.ascontiguousarray(frac),
                np.ascontiguousarray(offs[:-1], dtype=np.int64),
            )
        return self._flat

    def predict_matrix(self, X: np.ndarray, use_numba: bool | None = None) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        if X.shape[1] != len(self.feature_names):
            raise ForestError(f"expected {len(self.feature_names)} features, got {X.shape[1]}")
        if use_numba is None:
            use_numba = USE_NUMBA
        fn = _predict_numba if use_numba else _predict_numpy
        return fn(X, *self.flat())


def _check_training(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ForestError("empty training matrix")
    if X.shape[0] < 2:
        raise ForestError("need at least 2 training rows")
    if y.shape != (X.shape[0],):
        raise ForestError("labels do not match rows")
    if not np.all(np.isfinite(X)):
        raise ForestError("training matrix has non-finite values")
    if not np.isin(y, (0, 1)).all():
        raise ForestError("labels must be 0/1")
    y = y.astype(np.int64)
    if y.min() == y.max():
        raise ForestError("training labels contain a single class")
    return X, y


def train_forest_arrays(
    X, y, feature_names: Sequence[str], params: ForestParams = ForestParams(),
    region: Optional[AnatomicalRegion] = None, use_numba: bool | None = None,
) -> RandomForestModel:
    X, y = _check_training(X, y)
    n, p = X.shape
    if len(feature_names) != p:
        raise ForestError("feature_names length does not match matrix columns")
    mtry = params.resolved_mtry(p)
    trees = []
    for t in range(params.n_trees):
        rows, keys = tree_randomness(params.seed, t, n, p, params.bootstrap)
        trees.append(grow_tree(X, y, rows, keys, mtry, params.min_samples_leaf, params.max_depth, use_numba))
    meta = {"n_samples": int(n), "n_positive": int(y.sum()), "n_negative": int(n - y.sum())}
    return RandomForestModel(trees, list(feature_names), params, region, meta)


def train_forest(matrix, params: ForestParams = ForestParams(), region=None) -> RandomForestModel:
    """Train on a labelled :class:`~nfseg.selection.FeatureMatrix`."""
    if matrix.labels is None:
        raise ForestError("feature matrix has no training labels")
    return train_forest_arrays(matrix.values, matrix.labels, matrix.names, params, region)


def predict_proba(model: RandomForestModel, features: Dict[str, float]) -> float:
    """Tumor-class probability for one named feature vector."""
    missing = [n for n in model.feature_names if n not in features]
    extra = [n for n in features if n not in set(model.feature_names)]
    if missing or extra:
        raise ForestError(f"feature mismatch: missing {missing}, extra {extra}")
    x = np.array([[features[n] for n in model.feature_names]], dtype=np.float64)
    return float(model.predict_matrix(x)[0])


def importances(model: RandomForestModel) -> Dict[str, float]:
    """Mean decrease in Gini impurity, normalised to sum to one."""
    p = len(model.feature_names)
    total = np.zeros(p)
    for t in model.trees:
        n_root = t.count0[0] + t.count1[0]
        imp = np.zeros(p)
        for node in np.flatnonzero(t.feature >= 0):
            l, r = t.left[node], t.right[node]

            def ng(i):
                m = t.count0[i] + t.count1[i]
                return m - (t.count0[i] ** 2 + t.count1[i] ** 2) / m

            imp[t.feature[node]] += (ng(node) - ng(l) - ng(r)) / n_root
        total += imp
    total /= len(model.trees)
    s = total.sum()
    if s > 0:
        total = total / s
    return {name: float(v) for name, v in zip(model.feature_names, total)}


def oob_predictions(model: RandomForestModel, X, y=None) -> np.ndarray:
    """Out-of-bag probabilities for the training rows (NaN where never out of bag)."""
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    acc = np.zeros(n)
    cnt = np.zeros(n)
    single = lambda t: RandomForestModel([t], model.feature_names, ForestParams(1))  # noqa: E731
    for i, t in enumerate(model.trees):
        rows, _ = tree_randomness(model.params.seed, i, n, p, model.params.bootstrap)
        oob = np.ones(n, dtype=bool)
        oob[rows] = False
        if oob.any():
            acc[oob] += single(t).predict_matrix(X[oob])
            cnt[oob] += 1
    with np.errstate(invalid="ignore"):
        return acc / cnt


def oob_accuracy(model: RandomForestModel, X, y) -> float:
    prob = oob_predictions(model, X)
    seen = ~np.isnan(prob)
    return float(np.mean((prob[seen] >= 0.5).astype(int) == np.asarray(y)[seen]))


# --- bundles ------------------------------------------------------------------

@dataclass
class RegionClassifierBundle:
    models: Dict[AnatomicalRegion, RandomForestModel]
    fallback: str = "keep"
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.models:
            raise ForestError("bundle needs at least one region model")
        if self.fallback not in ("keep", "drop"):
            raise ForestError(f"unknown fallback policy {self.fallback!r}")


def _tree_to_json(t: Tree) -> dict:
    return {
        "feature": t.feature.tolist(),
        "threshold": t.threshold.tolist(),
        "left": t.left.tolist(),
        "right": t.right.tolist(),
        "count0": t.count0.tolist(),
        "count1": t.count1.tolist(),
    }


def _tree_from_json(d: dict) -> Tree:
    t = Tree(
        np.asarray(d["feature"], dtype=np.int64),
        np.asarray(d["threshold"], dtype=np.float64),
        np.asarray(d["left"], dtype=np.int64),
        np.asarray(d["right"], dtype=np.int64),
        np.asarray(d["count0"], dtype=np.float64),
        np.asarray(d["count1"], dtype=np.float64),
    )
    n = len(t.feature)
    if any(len(a) != n for a in t) or n == 0:
        raise ForestError("tree arrays have inconsistent lengths")
    inner = t.feature >= 0
    if np.any(t.left[inner] < 0) or np.any(t.left[inner] >= n) or np.any(t.right[inner] >= n):
        raise ForestError("tree child index out of range")
    return t


def bundle_to_json(bundle: RegionClassifierBundle) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "fallback": bundle.fallback,
        "metadata": bundle.metadata,
        "models": {
            region.value: {
                "feature_names": m.feature_names,
                "params": asdict(m.params),
                "metadata": m.metadata,
                "trees": [_tree_to_json(t) for t in m.trees],
            }
            for region, m in sorted(bundle.models.items(), key=lambda kv: kv[0].value)
        },
    }
    return json.dumps(doc, sort_keys=True)


def bundle_from_json(text: str) -> RegionClassifierBundle:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ForestError(f"malformed model file: {exc}") from exc
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise ForestError("malformed model file: no schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ForestError(f"unsupported model schema version {doc['schema_version']!r}")
    try:
        models = {}
        for name, m in doc["models"].items():
            region = AnatomicalRegion(name)
            models[region] = RandomForestModel(
                [_tree_from_json(t) for t in m["trees"]],
                list(m["feature_names"]),
                ForestParams(**m["params"]),
                region,
                dict(m.get("metadata", {})),
            )
        return RegionClassifierBundle(models, doc.get("fallback", "keep"), dict(doc.get("metadata", {})))
    except (KeyError, TypeError, ValueError) as exc:
        raise ForestError(f"malformed model file: {exc}") from exc


def save_model(bundle: RegionClassifierBundle, path) -> None:
    Path(path).write_text(bundle_to_json(bundle))


def load_model(path) -> RegionClassifierBundle:
    return bundle_from_json(Path(path).read_text())


# --- classification -----------------------------------------------------------

def classify_candidates(
    candidates: Sequence,
    matrix,
    bundle: RegionClassifierBundle,
    geometry,
    decision_threshold: float = 0.5,
    scan_id: Optional[str] = None,
) -> Tuple[List[int], np.ndarray, Dict[int, float]]:
    """Keep candidates whose region model scores >= ``decision_threshold``.

    Returns kept candidate ids, the final binary mask array and the
    per-candidate probabilities (absent for unmodelled regions).
    """
    row_of = matrix.row_index(scan_id)
    kept, probs = [], {}
    for cand in candidates:
        if cand.id not in row_of:
            raise ForestError(f"candidate {cand.id} has no feature row")
        model = bundle.models.get(cand.region)
        if model is None:
            if bundle.fallback == "keep":
                kept.append(cand.id)
            continue
        x = matrix.row_vector(row_of[cand.id], model.feature_names)
        p = float(model.predict_matrix(x[None, :])[0])
        probs[cand.id] = p
        if p >= decision_threshold:
            kept.append(cand.id)
    mask = np.zeros(geometry.dims, dtype=np.uint8)
    by_id = {c.id: c for c in candidates}
    for cid in kept:
        v = by_id[cid].voxel_indices
        mask[v[:, 0], v[:, 1], v[:, 2]] = 1
    return kept, mask, probs

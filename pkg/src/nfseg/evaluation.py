"""Segmentation and detection metrics, and study-level reports."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .anatomy import REGIONS, BodyRegionPartition, region_of
from .candidates import component_centroids, label_array
from .stats import pearson_r, wilcoxon_signed_rank
from .volume import CC_AXIS, LabelVolume, VolumeError


def _as_mask(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, LabelVolume) else v) > 0


def _same_grid(a, b):
    if isinstance(a, LabelVolume) and isinstance(b, LabelVolume):
        if not a.geometry.same_grid(b.geometry):
            raise VolumeError("prediction and ground truth have different geometry")
    elif np.shape(getattr(a, "data", a)) != np.shape(getattr(b, "data", b)):
        raise VolumeError("prediction and ground truth have different shapes")


def overlap_metrics(pred, gt) -> Tuple[float, float, float]:
    """(dsc, voe, arvd). Both empty scores (1, 0, 0); empty gt with a prediction gives arvd = inf."""
    _same_grid(pred, gt)
    p = _as_mask(pred)
    g = _as_mask(gt)
    np_ = int(np.count_nonzero(p))
    ng = int(np.count_nonzero(g))
    inter = int(np.count_nonzero(p & g))
    union = np_ + ng - inter
    if union == 0:
        return 1.0, 0.0, 0.0
    dsc = 2.0 * inter / (np_ + ng)
    voe = 1.0 - inter / union
    arvd = abs(np_ - ng) / ng if ng > 0 else math.inf
    return dsc, voe, arvd


@dataclass
class InstanceMatch:
    tp_pairs: List[Tuple[int, List[int]]]
    fn_gt_ids: List[int]
    fp_pred_ids: List[int]
    matched_pred_ids: List[int]

    @property
    def tp(self) -> int:
        return len(self.tp_pairs)

    @property
    def fn(self) -> int:
        return len(self.fn_gt_ids)

    @property
    def fp(self) -> int:
        return len(self.fp_pred_ids)


def _components(v) -> Tuple[np.ndarray, int]:
    """Accept a component-labelled volume/array, or a binary one to label."""
    arr = np.asarray(v.data if isinstance(v, LabelVolume) else v)
    if arr.dtype == bool or arr.max(initial=0) <= 1:
        return label_array(arr > 0)
    return arr.astype(np.int64), int(arr.max())


def match_instances(gt_components, pred_components) -> InstanceMatch:
    """A gt instance is TP iff it shares a voxel with any prediction; unmatched predictions are FP."""
    _same_grid(gt_components, pred_components)
    g, ng = _components(gt_components)
    p, npred = _components(pred_components)
    both = (g > 0) & (p > 0)
    pairs = np.unique(np.stack([g[both], p[both]], axis=1), axis=0) if both.any() else np.zeros((0, 2), int)
    by_gt: Dict[int, List[int]] = {}
    for gi, pi in pairs:
        by_gt.setdefault(int(gi), []).append(int(pi))
    gt_ids = np.unique(g[g > 0]).tolist()
    pred_ids = np.unique(p[p > 0]).tolist()
    matched_pred = sorted({int(pi) for _, pi in pairs})
    tp_pairs = [(gi, sorted(by_gt[gi])) for gi in gt_ids if gi in by_gt]
    fn = [gi for gi in gt_ids if gi not in by_gt]
    fp = [pi for pi in pred_ids if pi not in set(matched_pred)]
    return InstanceMatch(tp_pairs, fn, fp, matched_pred)


def per_tumor_dsc(match: InstanceMatch, gt_components, pred_components) -> List[float]:
    """DSC of every detected gt tumor against the union of predictions touching it."""
    g, _ = _components(gt_components)
    p, _ = _components(pred_components)
    out = []
    for gi, preds in match.tp_pairs:
        gm = g == gi
        pm = np.isin(p, preds)
        inter = np.count_nonzero(gm & pm)
        out.append(2.0 * inter / (np.count_nonzero(gm) + np.count_nonzero(pm)))
    return out


def f1_score(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom > 0 else 1.0


def detection_f1(
    match: InstanceMatch, partition: BodyRegionPartition, gt_components, pred_components,
    cc_axis: int = CC_AXIS,
) -> Tuple[float, Dict[str, float]]:
    """Overall F1 and per-region F1 (instances placed by centroid; empty regions omitted)."""
    g, ng = _components(gt_components)
    p, npred = _components(pred_components)
    gc = component_centroids(g, ng)
    pc = component_centroids(p, npred)

    def reg(c):
        return region_of(int(math.floor(c[cc_axis] + 0.5)), partition).value

    counts = {r.value: [0, 0, 0] for r in REGIONS}  # tp, fp, fn
    for gi, _ in match.tp_pairs:
        counts[reg(gc[gi])][0] += 1
    for gi in match.fn_gt_ids:
        counts[reg(gc[gi])][2] += 1
    for pi in match.fp_pred_ids:
        counts[reg(pc[pi])][1] += 1
    overall = f1_score(match.tp, match.fp, match.fn)
    per_region = {r: f1_score(*c) for r, c in counts.items() if sum(c) > 0}
    return overall, per_region


@dataclass
class ScanMetrics:
    scan_id: str
    dsc: float
    voe: float
    arvd: float
    tp: int
    fp: int
    fn: int
    f1: float
    per_tumor_dsc: List[float] = field(default_factory=list)
    per_region_f1: Dict[str, float] = field(default_factory=dict)
    tumor_burden_mm3: float = 0.0
    tumor_volumes_mm3: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        if math.isinf(d["arvd"]):
            d["arvd"] = "inf"
        return d


def evaluate_scan(pred, gt: LabelVolume, partition: BodyRegionPartition, scan_id: str = "scan") -> ScanMetrics:
    """All per-scan metrics for one binary prediction against a binary ground truth."""
    _same_grid(pred, gt)
    pm = _as_mask(pred)
    gm = _as_mask(gt)
    dsc, voe, arvd = overlap_metrics(pm, gm)
    g, ng = label_array(gm)
    p, npred = label_array(pm)
    match = match_instances(g, p)
    f1, per_region = detection_f1(match, partition, g, p)
    vv = gt.geometry.voxel_volume
    sizes = np.bincount(g.ravel(), minlength=ng + 1)
    return ScanMetrics(
        scan_id=scan_id,
        dsc=dsc, voe=voe, arvd=arvd,
        tp=match.tp, fp=match.fp, fn=match.fn, f1=f1,
        per_tumor_dsc=per_tumor_dsc(match, g, p),
        per_region_f1=per_region,
        tumor_burden_mm3=float(gm.sum() * vv),
        tumor_volumes_mm3=[float(sizes[gi] * vv) for gi, _ in match.tp_pairs],
    )


# --- study level ------------------------------------------------------------

def _mean_sd(vals: Sequence[float]) -> Tuple[float, float]:
    v = np.asarray([x for x in vals if math.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class StudyReport:
    methods: Dict[str, List[ScanMetrics]]
    aggregates: Dict[str, Dict[str, Tuple[float, float]]] = field(default_factory=dict)
    comparisons: List[dict] = field(default_factory=list)
    correlations: Dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return str(x)
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            return x

        doc = {
            "methods": {m: [s.to_dict() for s in rows] for m, rows in self.methods.items()},
            "aggregates": {m: {k: list(v) for k, v in a.items()} for m, a in self.aggregates.items()},
            "comparisons": self.comparisons,
            "correlations": self.correlations,
        }
        return json.dumps(clean(doc), indent=2, sort_keys=True)

    def table(self) -> str:
        head = ["method", "per-scan DSC", "per-tumor DSC", "F1", "VOE", "ARVD", "p (vs prev)"]
        pvals = {c["method"]: c for c in self.comparisons}
        rows = []
        for m, agg in self.aggregates.items():
            cmp = pvals.get(m)
            ptxt = "-" if cmp is None else f"{cmp['p_bonferroni']:.3g}"
            rows.append(
                [m]
                + [f"{agg[k][0]:.2f} ± {agg[k][1]:.2f}" for k in ("dsc", "per_tumor_dsc", "f1", "voe", "arvd")]
                + [ptxt]
            )
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths))  # noqa: E731
        return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])


def study_report(methods: Mapping[str, Sequence[ScanMetrics]]) -> StudyReport:
    """Aggregate per-scan rows per method, compare consecutive methods, correlate DSC with burden.

    Scans are paired across methods by ``scan_id`` and reported in sorted
    scan order. Comparisons use the Wilcoxon signed-rank test on per-scan
    DSC with a Bonferroni factor equal to the number of comparisons.
    """
    methods = {m: sorted(rows, key=lambda s: s.scan_id) for m, rows in methods.items()}
    report = StudyReport(methods)
    for m, rows in methods.items():
        report.aggregates[m] = {
            "dsc": _mean_sd([s.dsc for s in rows]),
            "per_tumor_dsc": _mean_sd([v for s in rows for v in s.per_tumor_dsc]),
            "f1": _mean_sd([s.f1 for s in rows]),
            "voe": _mean_sd([s.voe for s in rows]),
            "arvd": _mean_sd([s.arvd for s in rows]),
        }
    names = list(methods)
    n_cmp = max(1, len(names) - 1)
    for prev, cur in zip(names, names[1:]):
        a = {s.scan_id: s.dsc for s in methods[cur]}
        b = {s.scan_id: s.dsc for s in methods[prev]}
        common = sorted(set(a) & set(b))
        p_raw, p_adj = wilcoxon_signed_rank([a[k] for k in common], [b[k] for k in common], n_cmp)
        report.comparisons.append(
            {"method": cur, "versus": prev, "n": len(common), "p_raw": p_raw, "p_bonferroni": p_adj}
        )
    for m, rows in methods.items():
        entry = {}
        for key, xs, ys in (
            ("per_scan_dsc_vs_burden", [s.tumor_burden_mm3 for s in rows], [s.dsc for s in rows]),
            (
                "per_tumor_dsc_vs_volume",
                [v for s in rows for v in s.tumor_volumes_mm3],
                [v for s in rows for v in s.per_tumor_dsc],
            ),
        ):
            try:
                r, p = pearson_r(xs, ys)
                entry[key] = {"r": r, "p": p, "n": len(xs)}
            except ValueError as exc:
                entry[key] = {"r": None, "p": None, "n": len(xs), "note": str(exc)}
        report.correlations[m] = entry
    return report

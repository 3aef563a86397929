"""Feature matrices and the three-step selection workflow.

Near-zero-variance removal, Spearman redundancy pruning, then recursive
feature elimination driven by random-forest impurity importances.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .forest import ForestParams, importances, train_forest_arrays


class SelectionError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    """Rows are candidates, columns are named features in canonical order."""

    values: np.ndarray
    names: List[str]
    scan_ids: List[str]
    candidate_ids: List[int]
    regions: List[str]
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.scan_ids), len(self.names))
        self.names = list(self.names)
        self.candidate_ids = [int(c) for c in self.candidate_ids]
        n = len(self.scan_ids)
        if not (len(self.candidate_ids) == len(self.regions) == n):
            raise SelectionError("row key lists have different lengths")
        if len(set(zip(self.scan_ids, self.candidate_ids))) != n:
            raise SelectionError("row keys are not unique")
        if len(set(self.names)) != len(self.names):
            raise SelectionError("duplicate feature names")
        if not np.all(np.isfinite(self.values)):
            raise SelectionError("feature matrix contains missing or non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise SelectionError("labels do not match rows")

    @property
    def n_rows(self) -> int:
        return len(self.scan_ids)

    def columns(self, names: Sequence[str]) -> "FeatureMatrix":
        idx = [self.names.index(n) for n in names]
        return FeatureMatrix(self.values[:, idx], list(names), list(self.scan_ids),
                             list(self.candidate_ids), list(self.regions), self.labels)

    def rows(self, mask) -> "FeatureMatrix":
        sel = np.flatnonzero(np.asarray(mask))
        return FeatureMatrix(
            self.values[sel], list(self.names),
            [self.scan_ids[i] for i in sel], [self.candidate_ids[i] for i in sel],
            [self.regions[i] for i in sel],
            None if self.labels is None else self.labels[sel],
        )

    def row_index(self, scan_id: Optional[str] = None) -> Dict[int, int]:
        return {
            c: i for i, (s, c) in enumerate(zip(self.scan_ids, self.candidate_ids))
            if scan_id is None or s == scan_id
        }

    def row_vector(self, row: int, names: Sequence[str]) -> np.ndarray:
        missing = [n for n in names if n not in self.names]
        if missing:
            raise SelectionError(f"feature matrix lacks columns {missing}")
        return self.values[row, [self.names.index(n) for n in names]]

    @classmethod
    def concat(cls, parts: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        parts = list(parts)
        if not parts:
            raise SelectionError("nothing to concatenate")
        names = parts[0].names
        if any(p.names != names for p in parts):
            raise SelectionError("feature columns differ between matrices")
        labelled = all(p.labels is not None for p in parts)
        return cls(
            np.vstack([p.values for p in parts]) if parts else np.zeros((0, len(names))),
            names,
            [s for p in parts for s in p.scan_ids],
            [c for p in parts for c in p.candidate_ids],
            [r for p in parts for r in p.regions],
            np.concatenate([p.labels for p in parts]) if labelled else None,
        )

    # CSV body + JSON sidecar ------------------------------------------------
    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.names)
        for row in self.values:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            "columns": self.names,
            "rows": [
                {
                    "scan_id": s,
                    "candidate_id": c,
                    "region": r,
                    "label": None if self.labels is None else int(self.labels[i]),
                }
                for i, (s, c, r) in enumerate(zip(self.scan_ids, self.candidate_ids, self.regions))
            ],
        }

    def save(self, csv_path) -> Path:
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv())
        side = csv_path.with_suffix(".json")
        side.write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True))
        return side

    @classmethod
    def load(cls, csv_path) -> "FeatureMatrix":
        csv_path = Path(csv_path)
        side = json.loads(csv_path.with_suffix(".json").read_text())
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise SelectionError(f"{csv_path} is empty")
        names = rows[0]
        if names != side["columns"]:
            raise SelectionError("CSV header and sidecar columns disagree")
        values = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
        meta = side["rows"]
        if len(meta) != len(values):
            raise SelectionError("CSV rows and sidecar rows disagree")
        labels = [m["label"] for m in meta]
        return cls(
            values.reshape(len(meta), len(names)),
            names,
            [m["scan_id"] for m in meta],
            [m["candidate_id"] for m in meta],
            [m["region"] for m in meta],
            None if any(lbl is None for lbl in labels) else np.array(labels),
        )


@dataclass
class FeatureSelectionReport:
    dropped_near_zero_variance: List[str] = field(default_factory=list)
    dropped_correlated: List[Tuple[str, str, float]] = field(default_factory=list)
    dropped_by_rfe: List[str] = field(default_factory=list)
    selected_top_k: List[str] = field(default_factory=list)
    seed: Optional[int] = None
    rfe_iterations: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        d["dropped_correlated"] = [
            {"kept": k, "dropped": dr, "rho": rho} for k, dr, rho in self.dropped_correlated
        ]
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FeatureSelectionReport":
        d = json.loads(text)
        d["dropped_correlated"] = [(e["kept"], e["dropped"], e["rho"]) for e in d["dropped_correlated"]]
        return cls(**d)


def spearman_matrix(values: np.ndarray) -> np.ndarray:
    """Spearman rho between columns, average ranks for ties."""
    ranks = np.column_stack([rankdata(col, method="average") for col in values.T])
    return np.atleast_2d(np.corrcoef(ranks, rowvar=False))


def prune_features(
    matrix: FeatureMatrix, variance_eps: float = 1e-8, rho_max: float = 0.90
) -> Tuple[FeatureMatrix, FeatureSelectionReport]:
    """Drop near-constant columns, then the later column of every highly rank-correlated pair."""
    if matrix.n_rows < 2:
        raise SelectionError("need at least 2 rows")
    report = FeatureSelectionReport()
    var = matrix.values.var(axis=0)
    keep = []
    for name, v in zip(matrix.names, var):
        (keep if v >= variance_eps else report.dropped_near_zero_variance).append(name)
    if not keep:
        raise SelectionError("no features survive")
    sub = matrix.columns(keep)
    rho = spearman_matrix(sub.values)
    dropped = set()
    for i in range(len(keep)):
        if i in dropped:
            continue
        for j in range(i + 1, len(keep)):
            if j in dropped:
                continue
            if abs(rho[i, j]) >= rho_max:
                dropped.add(j)
                report.dropped_correlated.append((keep[i], keep[j], float(rho[i, j])))
    survivors = [n for k, n in enumerate(keep) if k not in dropped]
    return sub.columns(survivors), report


def rfe_select(
    matrix: FeatureMatrix,
    k: int = 10,
    forest_params: ForestParams = ForestParams(),
    seed: Optional[int] = None,
    step_fraction: float = 0.1,
    report: Optional[FeatureSelectionReport] = None,
) -> FeatureSelectionReport:
    """Recursive feature elimination down to ``k`` features.

    Each round trains a forest on the surviving columns and removes the
    ``max(1, ceil(step_fraction * remaining))`` least important ones
    (never going below ``k``). Ties in importance drop the later column.
    """
    if matrix.labels is None:
        raise SelectionError("RFE needs training labels")
    y = matrix.labels
    if np.unique(y).size < 2:
        raise SelectionError("training labels contain a single class")
    if len(matrix.names) < k:
        raise SelectionError(f"only {len(matrix.names)} columns, fewer than k={k}")
    if seed is not None:
        forest_params = ForestParams(**{**asdict(forest_params), "seed": seed})
    report = report if report is not None else FeatureSelectionReport()
    report.seed = forest_params.seed
    remaining = list(matrix.names)
    while len(remaining) > k:
        cols = [matrix.names.index(n) for n in remaining]
        model = train_forest_arrays(matrix.values[:, cols], y, remaining, forest_params)
        imp = importances(model)
        n_drop = min(max(1, math.ceil(step_fraction * len(remaining))), len(remaining) - k)
        # ascending importance; among equals the later column goes first
        order = sorted(range(len(remaining)), key=lambda i: (imp[remaining[i]], -i))
        gone = {remaining[i] for i in order[:n_drop]}
        report.dropped_by_rfe.extend(n for n in remaining if n in gone)
        remaining = [n for n in remaining if n not in gone]
        report.rfe_iterations += 1
    report.selected_top_k = remaining
    return report


def select_features(
    matrix: FeatureMatrix,
    k: int = 10,
    variance_eps: float = 1e-8,
    rho_max: float = 0.90,
    forest_params: ForestParams = ForestParams(),
) -> FeatureSelectionReport:
    """Run all three steps. If pruning leaves fewer than ``k`` columns, all survivors are kept."""
    pruned, report = prune_features(matrix, variance_eps, rho_max)
    k_eff = min(k, len(pruned.names))
    return rfe_select(pruned, k_eff, forest_params, report=report)

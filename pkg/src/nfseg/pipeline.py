"""End-to-end orchestration: anatomy refinement, candidate extraction, classification.

Every stage can run in memory (:func:`process_scan`) or from files
(:func:`run_pipeline`), which persists each intermediate artifact and a
:class:`RunManifest` so any stage can be re-run on its own.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .anatomy import (
    DEFAULT_ZONE_RADIUS_MM,
    REGIONS,
    BodyRegionPartition,
    LabelMappingConfig,
    MappingError,
    build_high_risk_zone,
    extract_landmarks,
    refine_anatomy_mask,
)
from .candidates import (
    ThresholdPolicy,
    TumorCandidate,
    binarize,
    build_candidates,
    candidates_to_json,
    fuse_ensemble,
    label_components,
)
from .evaluation import ScanMetrics, evaluate_scan
from .forest import (
    ForestError,
    ForestParams,
    RegionClassifierBundle,
    classify_candidates,
    load_model,
    train_forest,
)
from .io import is_nifti, read_volume, write_volume
from .radiomics import FEATURE_NAMES, extract_features
from .selection import FeatureMatrix, FeatureSelectionReport, SelectionError, select_features
from .volume import ConfidenceVolume, ImageVolume, LabelVolume, VolumeError, resample

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or inconsistent pipeline configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``data_error`` flags bad inputs."""

    def __init__(self, stage: str, message: str, data_error: bool = False):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.data_error = data_error


_DATA_ERRORS = (VolumeError, MappingError, FileNotFoundError, SelectionError, ForestError)


@contextmanager
def stage(name: str, timings: Optional[Dict[str, float]] = None):
    """Tag any exception raised inside with the stage name and record wall time."""
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except _DATA_ERRORS as exc:
        raise StageError(name, str(exc), data_error=True) from exc
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    finally:
        if timings is not None:
            timings[name] = time.perf_counter() - t0


# --- configuration ------------------------------------------------------------

@dataclass
class PipelineConfig:
    # inputs / outputs
    image: Optional[str] = None
    anatomy_raw: Optional[str] = None
    ensemble_dir: Optional[str] = None
    gt: Optional[str] = None
    output_dir: Optional[str] = None
    model: Optional[str] = None
    mapping: Optional[str] = None
    scan_id: Optional[str] = None
    scans: List[dict] = field(default_factory=list)
    # stage parameters
    target_spacing: Optional[Tuple[float, float, float]] = None
    zone_radius_mm: float = DEFAULT_ZONE_RADIUS_MM
    threshold: str = "high"
    tau: Optional[float] = None
    min_voxels: int = 3
    glcm_bins: int = 32
    glcm_distance: int = 1
    variance_eps: float = 1e-8
    rho_max: float = 0.90
    k: int = 10
    forest: Dict = field(default_factory=dict)
    decision_threshold: float = 0.5
    seed: int = 0
    classify: bool = True
    workers: int = 1

    _PATH_KEYS = ("image", "anatomy_raw", "ensemble_dir", "gt", "output_dir", "model", "mapping")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.policy()
            self.forest_params()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if not self.zone_radius_mm > 0:
            raise ConfigError("zone_radius_mm must be positive")
        if self.min_voxels < 1:
            raise ConfigError("min_voxels must be >= 1")
        if self.glcm_bins < 2 or self.glcm_distance < 1:
            raise ConfigError("glcm_bins must be >= 2 and glcm_distance >= 1")
        if self.k < 1 or not (0 < self.rho_max <= 1) or self.variance_eps < 0:
            raise ConfigError("selection parameters out of range")
        if not (0 <= self.decision_threshold <= 1):
            raise ConfigError("decision_threshold must lie in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.target_spacing is not None:
            ts = tuple(float(v) for v in self.target_spacing)
            if len(ts) != 3 or min(ts) <= 0:
                raise ConfigError("target_spacing must be three positive numbers")
            self.target_spacing = ts

    def policy(self) -> ThresholdPolicy:
        return ThresholdPolicy.from_name(self.threshold, self.tau)

    def forest_params(self) -> ForestParams:
        return ForestParams(**{**self.forest, "seed": self.seed})

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["target_spacing"] is not None:
            d["target_spacing"] = list(d["target_spacing"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, overrides: Optional[dict] = None) -> "PipelineConfig":
        """Read a JSON config; ``overrides`` (non-None entries) win over file values."""
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
        # paths in the file are relative to the file; flag paths stay relative to the cwd
        for key in cls._PATH_KEYS:
            if isinstance(d.get(key), str) and not Path(d[key]).is_absolute():
                d[key] = str((path.parent / d[key]).resolve())
        d.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(d)

    def with_overrides(self, **kw) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


# --- in-memory stages ------------------------------------------------------------

@dataclass
class ScanInputs:
    scan_id: str
    image: ImageVolume
    anatomy_raw: LabelVolume
    ensemble: List[ConfidenceVolume]
    gt: Optional[LabelVolume] = None


@dataclass
class ScanResult:
    scan_id: str
    refined: LabelVolume
    partition: BodyRegionPartition
    fused: ConfidenceVolume
    binary: LabelVolume
    components: LabelVolume
    candidates: List[TumorCandidate]
    features: FeatureMatrix
    final: LabelVolume
    kept_ids: List[int]
    probabilities: Dict[int, float]
    timings: Dict[str, float] = field(default_factory=dict)
    metrics: Optional[ScanMetrics] = None


def refine_stage(raw: LabelVolume, radius_mm: float, mapping: Optional[LabelMappingConfig] = None):
    """Refined anatomy with the high-risk zone, and the region landmarks."""
    refined = refine_anatomy_mask(raw, mapping or LabelMappingConfig.default())
    zoned = build_high_risk_zone(refined, radius_mm)
    return zoned, extract_landmarks(refined)


def candidate_labels(candidates: Sequence[TumorCandidate], gt: LabelVolume) -> np.ndarray:
    """1 for candidates touching at least one ground-truth voxel, else 0."""
    g = gt.data > 0
    return np.array(
        [int(g[c.voxel_indices[:, 0], c.voxel_indices[:, 1], c.voxel_indices[:, 2]].any()) for c in candidates],
        dtype=np.int64,
    )


def feature_matrix(
    candidates: Sequence[TumorCandidate],
    image: ImageVolume,
    scan_id: str,
    bins: int = 32,
    distance: int = 1,
    gt: Optional[LabelVolume] = None,
) -> FeatureMatrix:
    rows = [list(extract_features(c, image, bins, distance).values()) for c in candidates]
    values = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(FEATURE_NAMES))
    return FeatureMatrix(
        values,
        list(FEATURE_NAMES),
        [scan_id] * len(candidates),
        [c.id for c in candidates],
        [c.region.value for c in candidates],
        None if gt is None else candidate_labels(candidates, gt),
    )


def _resampled(inputs: ScanInputs, spacing) -> ScanInputs:
    if spacing is None:
        return inputs
    return ScanInputs(
        inputs.scan_id,
        resample(inputs.image, spacing, "linear"),
        resample(inputs.anatomy_raw, spacing, "nearest"),
        [resample(m, spacing, "linear") for m in inputs.ensemble],
        None if inputs.gt is None else resample(inputs.gt, spacing, "nearest"),
    )


def process_scan(
    inputs: ScanInputs,
    config: PipelineConfig,
    bundle: Optional[RegionClassifierBundle] = None,
    mapping: Optional[LabelMappingConfig] = None,
) -> ScanResult:
    """Run every stage on one scan held in memory."""
    t: Dict[str, float] = {}
    if config.classify and bundle is None:
        raise StageError("classify", "classification is enabled but no model bundle was given")
    with stage("resample", t):
        inputs = _resampled(inputs, config.target_spacing)
    with stage("refine-anatomy", t):
        refined, partition = refine_stage(inputs.anatomy_raw, config.zone_radius_mm, mapping)
        if not refined.geometry.same_grid(inputs.image.geometry):
            raise VolumeError("anatomy and image grids differ")
    with stage("fuse", t):
        fused = fuse_ensemble(inputs.ensemble)
        if not fused.geometry.same_grid(inputs.image.geometry):
            raise VolumeError("ensemble and image grids differ")
    with stage("binarize", t):
        binary = binarize(fused, config.policy())
    with stage("components", t):
        components, _ = label_components(binary)
    with stage("candidates", t):
        cands = build_candidates(components, fused, partition, config.min_voxels)
    with stage("features", t):
        fm = feature_matrix(cands, inputs.image, inputs.scan_id, config.glcm_bins, config.glcm_distance, inputs.gt)
    with stage("classify", t):
        if config.classify:
            kept, mask, probs = classify_candidates(
                cands, fm, bundle, fused.geometry, config.decision_threshold, inputs.scan_id
            )
        else:
            kept, probs = [c.id for c in cands], {}
            mask = np.zeros(fused.geometry.dims, dtype=np.uint8)
            for c in cands:
                mask[c.voxel_indices[:, 0], c.voxel_indices[:, 1], c.voxel_indices[:, 2]] = 1
        final = LabelVolume(fused.geometry, mask, {0: "background", 1: "tumor"})
    metrics = None
    if inputs.gt is not None:
        with stage("evaluate", t):
            metrics = evaluate_scan(final, inputs.gt, partition, inputs.scan_id)
    return ScanResult(
        inputs.scan_id, refined, partition, fused, binary, components, cands, fm,
        final, kept, probs, t, metrics,
    )


def evaluate_run(pred, gt: LabelVolume, partition: BodyRegionPartition, scan_id: str = "scan") -> ScanMetrics:
    """Score a final mask; thin wrapper over :func:`nfseg.evaluation.evaluate_scan`."""
    with stage("evaluate"):
        return evaluate_scan(pred, gt, partition, scan_id)


def train_classifier(
    matrices: Sequence[FeatureMatrix], config: PipelineConfig
) -> Tuple[RegionClassifierBundle, FeatureSelectionReport]:
    """Pooled feature selection, then one forest per region on the selected columns.

    Regions without rows or with a single class are skipped; the bundle
    keeps such candidates at prediction time.
    """
    pooled = FeatureMatrix.concat([m for m in matrices if m.n_rows])
    if pooled.labels is None:
        raise SelectionError("training matrices carry no labels")
    params = config.forest_params()
    report = select_features(pooled, config.k, config.variance_eps, config.rho_max, params)
    selected = pooled.columns(report.selected_top_k)
    models, skipped = {}, {}
    for region in REGIONS:
        rows = np.array([r == region.value for r in selected.regions])
        sub = selected.rows(rows)
        if sub.n_rows == 0:
            skipped[region.value] = "no candidates"
        elif np.unique(sub.labels).size < 2:
            skipped[region.value] = f"single class ({int(sub.labels[0])})"
        else:
            models[region] = train_forest(sub, params, region)
    for r, why in skipped.items():
        log.warning("no classifier for region %s: %s", r, why)
    if not models:
        raise ForestError("no region has both tumor and non-tumor candidates")
    meta = {"selected_features": report.selected_top_k, "skipped_regions": skipped, "seed": config.seed}
    return RegionClassifierBundle(models, "keep", meta), report


# --- file-based runs -----------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensemble_files(directory) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"ensemble directory not found: {d}")
    files = sorted(p for p in d.iterdir() if is_nifti(p))
    if not files:
        raise FileNotFoundError(f"ensemble directory {d} holds no NIfTI files")
    return files


@dataclass
class RunManifest:
    config: dict
    software_version: str
    timings: Dict[str, float]
    inputs: Dict[str, str]
    outputs: Dict[str, str]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


OUTPUT_FILES = (
    "anatomy_refined.nii.gz",
    "landmarks.json",
    "confidence_fused.nii.gz",
    "binary.nii.gz",
    "components.nii.gz",
    "candidates.json",
    "features.csv",
    "features.json",
    "classification.json",
    "final_mask.nii.gz",
)


def _require(config: PipelineConfig, *keys):
    missing = [k for k in keys if getattr(config, k) in (None, "")]
    if missing:
        raise ConfigError(f"config is missing {missing}")


def load_inputs(config: PipelineConfig) -> Tuple[ScanInputs, Dict[str, str]]:
    """Read every input volume named in ``config`` and hash the files."""
    _require(config, "image", "anatomy_raw", "ensemble_dir")
    hashes = {}
    with stage("load-image"):
        image = read_volume(config.image, "image")
        hashes[str(config.image)] = sha256_file(config.image)
    with stage("load-anatomy"):
        raw = read_volume(config.anatomy_raw, "label")
        hashes[str(config.anatomy_raw)] = sha256_file(config.anatomy_raw)
    with stage("fuse"):
        members = []
        for f in ensemble_files(config.ensemble_dir):
            members.append(read_volume(f, "confidence"))
            hashes[str(f)] = sha256_file(f)
    gt = None
    if config.gt:
        with stage("load-gt"):
            gt = read_volume(config.gt, "label")
            hashes[str(config.gt)] = sha256_file(config.gt)
    scan_id = config.scan_id or _stem(config.image)
    return ScanInputs(scan_id, image, raw, members, gt), hashes


def _stem(path) -> str:
    name = Path(path).name
    for suf in (".nii.gz", ".nii"):
        if name.endswith(suf):
            return name[: -len(suf)]
    return name


def write_scan_outputs(result: ScanResult, out: Path) -> Dict[str, str]:
    out.mkdir(parents=True, exist_ok=True)
    write_volume(result.refined, out / "anatomy_refined.nii.gz")
    (out / "landmarks.json").write_text(json.dumps(result.partition.to_dict(), indent=2, sort_keys=True))
    write_volume(result.fused, out / "confidence_fused.nii.gz")
    write_volume(result.binary, out / "binary.nii.gz")
    write_volume(result.components, out / "components.nii.gz")
    (out / "candidates.json").write_text(candidates_to_json(result.candidates, scan_id=result.scan_id))
    result.features.save(out / "features.csv")
    cls_doc = {
        "scan_id": result.scan_id,
        "kept": result.kept_ids,
        "probabilities": {str(k): v for k, v in sorted(result.probabilities.items())},
    }
    (out / "classification.json").write_text(json.dumps(cls_doc, indent=2, sort_keys=True))
    write_volume(result.final, out / "final_mask.nii.gz")
    names = list(OUTPUT_FILES)
    if result.metrics is not None:
        (out / "metrics.json").write_text(json.dumps(result.metrics.to_dict(), indent=2, sort_keys=True))
        names.append("metrics.json")
    return {n: sha256_file(out / n) for n in names}


def run_pipeline(config: PipelineConfig) -> Tuple[RunManifest, ScanResult]:
    """Full pipeline for the scan named in ``config``; writes every stage artifact."""
    _require(config, "output_dir")
    inputs, hashes = load_inputs(config)
    bundle = None
    if config.classify:
        if not config.model:
            raise StageError("classify", "classification is enabled but no model path is configured")
        with stage("classify"):
            bundle = load_model(config.model)
        hashes[str(config.model)] = sha256_file(config.model)
    mapping = None
    if config.mapping:
        with stage("refine-anatomy"):
            mapping = LabelMappingConfig.load(config.mapping)
        hashes[str(config.mapping)] = sha256_file(config.mapping)
    t0 = time.perf_counter()
    result = process_scan(inputs, config, bundle, mapping)
    out = Path(config.output_dir)
    with stage("write-outputs", result.timings):
        outputs = write_scan_outputs(result, out)
    result.timings["total"] = time.perf_counter() - t0
    manifest = RunManifest(config.to_dict(), __version__, result.timings, hashes, outputs)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest, result


def _run_one(args) -> Tuple[str, dict]:
    cfg_dict, scan = args
    cfg = PipelineConfig.from_dict({**cfg_dict, **scan, "scans": []})
    manifest, result = run_pipeline(cfg)
    return result.scan_id, asdict(manifest)


def run_batch(config: PipelineConfig) -> Dict[str, RunManifest]:
    """Run every entry of ``config.scans``; outputs go to ``output_dir/<scan_id>``.

    With ``workers > 1`` scans run in separate processes. Results are
    returned keyed and ordered by scan id whatever the completion order.
    """
    _require(config, "output_dir")
    base = config.to_dict()
    jobs = []
    for i, scan in enumerate(config.scans):
        scan = dict(scan)
        sid = scan.get("scan_id") or _stem(scan.get("image", f"scan_{i:03d}"))
        scan["scan_id"] = sid
        scan.setdefault("output_dir", str(Path(config.output_dir) / sid))
        jobs.append((base, scan))
    if len({j[1]["scan_id"] for j in jobs}) != len(jobs):
        raise ConfigError("scan ids in the batch are not unique")
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            done = list(ex.map(_run_one, jobs))
    else:
        done = [_run_one(j) for j in jobs]
    return {sid: RunManifest(**m) for sid, m in sorted(done)}


def configure_logging() -> None:
    level = os.environ.get("NF_PIPELINE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")

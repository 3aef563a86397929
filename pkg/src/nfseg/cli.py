"""Command-line interface.

Stage subcommands read and write files in one working directory
(``--output``), so the chain ``refine-anatomy -> extract-candidates ->
features -> classify`` leaves the same artifacts as ``run``.

Exit codes: 0 success, 2 configuration error, 3 bad input data,
4 any other stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .anatomy import BodyRegionPartition, LabelMappingConfig
from .candidates import (
    binarize,
    build_candidates,
    candidates_from_components,
    candidates_to_json,
    fuse_ensemble,
    label_components,
)
from .evaluation import evaluate_scan, study_report
from .forest import classify_candidates, load_model, save_model
from .io import read_volume, write_volume
from .phantom import PhantomConfig, generate_phantom
from .pipeline import (
    ConfigError,
    PipelineConfig,
    StageError,
    _DATA_ERRORS,
    _stem,
    configure_logging,
    ensemble_files,
    feature_matrix,
    refine_stage,
    run_batch,
    run_pipeline,
    stage,
    train_classifier,
)
from .selection import FeatureMatrix, select_features
from .volume import LabelVolume

log = logging.getLogger("nfseg.cli")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_STAGE = 0, 2, 3, 4

# flag dest -> config key
_FLAG_KEYS = {
    "seed": "seed",
    "threshold": "threshold",
    "tau": "tau",
    "workers": "workers",
    "output": "output_dir",
    "image": "image",
    "anatomy": "anatomy_raw",
    "ensemble": "ensemble_dir",
    "gt": "gt",
    "model": "model",
    "mapping": "mapping",
    "scan_id": "scan_id",
    "min_voxels": "min_voxels",
    "radius": "zone_radius_mm",
    "k": "k",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON pipeline config; flags override its keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", choices=("low", "high", "custom"))
    p.add_argument("--tau", type=float)
    p.add_argument("--no-classify", action="store_true", help="skip the candidate classifier")
    p.add_argument("--workers", type=int)
    p.add_argument("--output", help="working / output directory")
    p.add_argument("--scan-id", help="scan identifier recorded in stage outputs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nfseg", description="Neurofibroma segmentation post-processing pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("refine-anatomy", help="refine raw organ labels, add the high-risk zone, find landmarks")
    _common(p)
    p.add_argument("--anatomy", help="raw organ label volume")
    p.add_argument("--mapping", help="label mapping file (default: built-in)")
    p.add_argument("--radius", type=float, help="high-risk zone radius in mm")

    p = sub.add_parser("extract-candidates", help="fuse the ensemble, threshold and label components")
    _common(p)
    p.add_argument("--ensemble", help="directory of confidence volumes")
    p.add_argument("--min-voxels", type=int)

    p = sub.add_parser("features", help="radiomics features for every candidate")
    _common(p)
    p.add_argument("--image", help="image volume")
    p.add_argument("--gt", help="ground-truth tumor mask (adds training labels)")

    p = sub.add_parser("select-features", help="variance / correlation pruning and RFE on pooled features")
    _common(p)
    p.add_argument("--features", nargs="+", required=True, help="feature CSV files")
    p.add_argument("--k", type=int)

    p = sub.add_parser("train-classifier", help="train per-region forests on selected features")
    _common(p)
    p.add_argument("--features", nargs="+", required=True, help="labelled feature CSV files")
    p.add_argument("--k", type=int)

    p = sub.add_parser("classify", help="keep the candidates the classifier accepts")
    _common(p)
    p.add_argument("--model", help="model bundle JSON")

    p = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    _common(p)
    p.add_argument("--pred", nargs="+", required=True, help="predicted masks, or METHOD=PATH pairs")
    p.add_argument("--gt", nargs="+", required=True, help="ground-truth masks, one per prediction scan")
    p.add_argument("--landmarks", nargs="+", required=True, help="landmarks.json, one per scan")

    p = sub.add_parser("simulate", help="write seeded phantom scans")
    _common(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--fp-blobs", type=int)
    p.add_argument("--phantom-config", help="JSON with phantom parameters")

    p = sub.add_parser("run", help="full pipeline for one scan or a batch")
    _common(p)
    p.add_argument("--image")
    p.add_argument("--anatomy")
    p.add_argument("--ensemble")
    p.add_argument("--gt")
    p.add_argument("--model")
    p.add_argument("--mapping")
    return ap


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """flag > config file > default."""
    overrides = {
        key: getattr(args, dest) for dest, key in _FLAG_KEYS.items()
        if getattr(args, dest, None) is not None
    }
    if getattr(args, "no_classify", False):
        overrides["classify"] = False
    if args.config:
        return PipelineConfig.load(args.config, overrides)
    return PipelineConfig.from_dict(overrides)


def _workdir(cfg: PipelineConfig) -> Path:
    if not cfg.output_dir:
        raise ConfigError("an output directory is required (--output or output_dir)")
    d = Path(cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _need(path: Path, stage_name: str) -> Path:
    if not path.exists():
        raise StageError(stage_name, f"missing input {path}", data_error=True)
    return path


def _load_partition(path) -> BodyRegionPartition:
    return BodyRegionPartition.from_dict(json.loads(Path(path).read_text()))


def _load_candidates(work: Path, stage_name: str):
    comps = read_volume(_need(work / "components.nii.gz", stage_name), "label")
    fused = read_volume(_need(work / "confidence_fused.nii.gz", stage_name), "confidence")
    part = _load_partition(_need(work / "landmarks.json", stage_name))
    doc = json.loads(_need(work / "candidates.json", stage_name).read_text())
    ids = [c["id"] for c in doc["candidates"]]
    return doc.get("scan_id"), candidates_from_components(comps, fused, part, ids), fused, part


# --- subcommands -------------------------------------------------------------------

def cmd_refine(cfg: PipelineConfig, args) -> int:
    work = _workdir(cfg)
    if not cfg.anatomy_raw:
        raise ConfigError("refine-anatomy needs --anatomy")
    with stage("refine-anatomy"):
        raw = read_volume(cfg.anatomy_raw, "label")
        mapping = LabelMappingConfig.load(cfg.mapping) if cfg.mapping else None
        refined, part = refine_stage(raw, cfg.zone_radius_mm, mapping)
        write_volume(refined, work / "anatomy_refined.nii.gz")
        (work / "landmarks.json").write_text(json.dumps(part.to_dict(), indent=2, sort_keys=True))
    print(json.dumps(part.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_extract(cfg: PipelineConfig, args) -> int:
    work = _workdir(cfg)
    if not cfg.ensemble_dir:
        raise ConfigError("extract-candidates needs --ensemble")
    with stage("fuse"):
        fused = fuse_ensemble([read_volume(f, "confidence") for f in ensemble_files(cfg.ensemble_dir)])
    with stage("candidates"):
        part = _load_partition(_need(work / "landmarks.json", "candidates"))
        binary = binarize(fused, cfg.policy())
        comps, _ = label_components(binary)
        cands = build_candidates(comps, fused, part, cfg.min_voxels)
        write_volume(fused, work / "confidence_fused.nii.gz")
        write_volume(binary, work / "binary.nii.gz")
        write_volume(comps, work / "components.nii.gz")
        scan_id = cfg.scan_id or (_stem(cfg.image) if cfg.image else work.name)
        (work / "candidates.json").write_text(candidates_to_json(cands, scan_id=scan_id))
    print(f"{len(cands)} candidates")
    return EXIT_OK


def cmd_features(cfg: PipelineConfig, args) -> int:
    work = _workdir(cfg)
    if not cfg.image:
        raise ConfigError("features needs --image")
    scan_id, cands, _, _ = _load_candidates(work, "features")
    with stage("features"):
        image = read_volume(cfg.image, "image")
        gt = read_volume(cfg.gt, "label") if cfg.gt else None
        fm = feature_matrix(cands, image, cfg.scan_id or scan_id or work.name,
                            cfg.glcm_bins, cfg.glcm_distance, gt)
        fm.save(work / "features.csv")
    print(f"{fm.n_rows} x {len(fm.names)} feature matrix")
    return EXIT_OK


def _pooled(paths) -> FeatureMatrix:
    return FeatureMatrix.concat([FeatureMatrix.load(p) for p in paths])


def cmd_select(cfg: PipelineConfig, args) -> int:
    work = _workdir(cfg)
    with stage("select-features"):
        report = select_features(_pooled(args.features), cfg.k, cfg.variance_eps, cfg.rho_max, cfg.forest_params())
        (work / "selection.json").write_text(report.to_json())
    print("\n".join(report.selected_top_k))
    return EXIT_OK


def cmd_train(cfg: PipelineConfig, args) -> int:
    work = _workdir(cfg)
    with stage("train-classifier"):
        parts = [FeatureMatrix.load(p) for p in args.features]
        bundle, report = train_classifier(parts, cfg)
        (work / "selection.json").write_text(report.to_json())
        save_model(bundle, work / "model.json")
    print(f"trained regions: {', '.join(sorted(r.value for r in bundle.models))}")
    return EXIT_OK


def cmd_classify(cfg: PipelineConfig, args) -> int:
    work = _workdir(cfg)
    scan_id, cands, fused, _ = _load_candidates(work, "classify")
    with stage("classify"):
        fm = FeatureMatrix.load(_need(work / "features.csv", "classify"))
        if cfg.classify:
            if not cfg.model:
                raise StageError("classify", "classification is enabled but no model path is configured")
            bundle = load_model(cfg.model)
            kept, mask, probs = classify_candidates(
                cands, fm, bundle, fused.geometry, cfg.decision_threshold, fm.scan_ids[0] if fm.n_rows else None
            )
        else:
            kept, probs = [c.id for c in cands], {}
            mask = np.zeros(fused.geometry.dims, dtype=np.uint8)
            for c in cands:
                mask[tuple(c.voxel_indices.T)] = 1
        doc = {
            "scan_id": fm.scan_ids[0] if fm.n_rows else scan_id,
            "kept": kept,
            "probabilities": {str(k): v for k, v in sorted(probs.items())},
        }
        (work / "classification.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        write_volume(LabelVolume(fused.geometry, mask, {0: "background", 1: "tumor"}), work / "final_mask.nii.gz")
    print(f"kept {len(kept)} of {len(cands)} candidates")
    return EXIT_OK


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    work = _workdir(cfg)
    if not (len(args.gt) == len(args.landmarks)):
        raise ConfigError("--gt and --landmarks need one entry per scan")
    methods = {}
    for item in args.pred:
        method, _, path = item.rpartition("=")
        methods.setdefault(method or "prediction", []).append(path)
    with stage("evaluate"):
        rows = {}
        for method, preds in methods.items():
            if len(preds) != len(args.gt):
                raise ConfigError(f"method {method!r} has {len(preds)} predictions for {len(args.gt)} scans")
            rows[method] = []
            for pred_p, gt_p, lm_p in zip(preds, args.gt, args.landmarks):
                pred = read_volume(pred_p, "label")
                gt = read_volume(gt_p, "label")
                rows[method].append(evaluate_scan(pred, gt, _load_partition(lm_p), _stem(gt_p)))
        report = study_report(rows)
        (work / "evaluation.json").write_text(report.to_json())
        (work / "evaluation.txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


def cmd_simulate(cfg: PipelineConfig, args) -> int:
    work = _workdir(cfg)
    base = {}
    if args.phantom_config:
        try:
            base = json.loads(Path(args.phantom_config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read phantom config: {exc}") from exc
    if args.fp_blobs is not None:
        base["fp_blob_count"] = args.fp_blobs
    first = cfg.seed if args.seed is not None else int(base.get("seed", 0))
    scans = []
    for i in range(args.count):
        try:
            pcfg = PhantomConfig.from_dict({**base, "seed": first + i})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad phantom config: {exc}") from exc
        with stage("simulate"):
            b = generate_phantom(pcfg)
            sid = f"phantom_{first + i:04d}"
            d = work / sid
            (d / "ensemble").mkdir(parents=True, exist_ok=True)
            write_volume(b.image, d / "image.nii.gz")
            write_volume(b.anatomy_raw, d / "anatomy_raw.nii.gz")
            write_volume(b.gt_tumors, d / "gt.nii.gz")
            for m, conf in enumerate(b.ensemble):
                write_volume(conf, d / "ensemble" / f"member_{m:02d}.nii.gz")
            (d / "phantom.json").write_text(json.dumps(b.manifest, indent=2, sort_keys=True))
        scans.append({
            "scan_id": sid,
            "image": f"{sid}/image.nii.gz",
            "anatomy_raw": f"{sid}/anatomy_raw.nii.gz",
            "ensemble_dir": f"{sid}/ensemble",
            "gt": f"{sid}/gt.nii.gz",
        })
    (work / "scans.json").write_text(json.dumps({"scans": scans}, indent=2, sort_keys=True))
    print(f"wrote {len(scans)} phantom(s) to {work}")
    return EXIT_OK


def cmd_run(cfg: PipelineConfig, args) -> int:
    _workdir(cfg)
    if cfg.scans:
        base = Path(args.config).parent if args.config else Path.cwd()
        scans = []
        for s in cfg.scans:
            s = dict(s)
            for key in ("image", "anatomy_raw", "ensemble_dir", "gt"):
                if s.get(key) and not Path(s[key]).is_absolute():
                    s[key] = str((base / s[key]).resolve())
            scans.append(s)
        manifests = run_batch(replace(cfg, scans=scans))
        for sid, m in manifests.items():
            print(f"{sid}: {len(m.outputs)} outputs")
    else:
        manifest, result = run_pipeline(cfg)
        msg = f"{result.scan_id}: kept {len(result.kept_ids)} of {len(result.candidates)} candidates"
        if result.metrics is not None:
            msg += f", dsc {result.metrics.dsc:.4f}, f1 {result.metrics.f1:.4f}"
        print(msg)
    return EXIT_OK


COMMANDS = {
    "refine-anatomy": cmd_refine,
    "extract-candidates": cmd_extract,
    "features": cmd_features,
    "select-features": cmd_select,
    "train-classifier": cmd_train,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "run": cmd_run,
}


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_DATA if exc.data_error else EXIT_STAGE
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Ensemble fusion, thresholding and tumor-candidate extraction."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from ._jit import USE_NUMBA, njit
from .anatomy import AnatomicalRegion, BodyRegionPartition, region_of
from .volume import ConfidenceVolume, LabelVolume, VolumeError, VolumeGeometry

DEFAULT_LOW_TAU = 0.25
DEFAULT_HIGH_TAU = 0.5


@dataclass(frozen=True)
class ThresholdPolicy:
    tau: float = DEFAULT_HIGH_TAU
    name: str = "high"

    def __post_init__(self):
        if self.name not in ("low", "high", "custom"):
            raise ValueError(f"unknown threshold policy {self.name!r}")
        if not (0.0 < self.tau < 1.0):
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.name == "high" and self.tau != DEFAULT_HIGH_TAU:
            raise ValueError("the high policy is fixed at tau = 0.5")

    @classmethod
    def high(cls) -> "ThresholdPolicy":
        return cls(DEFAULT_HIGH_TAU, "high")

    @classmethod
    def low(cls, tau: float = DEFAULT_LOW_TAU) -> "ThresholdPolicy":
        return cls(tau, "low")

    @classmethod
    def custom(cls, tau: float) -> "ThresholdPolicy":
        return cls(tau, "custom")

    @classmethod
    def from_name(cls, name: str, tau: float | None = None) -> "ThresholdPolicy":
        if name == "high":
            return cls.high()
        if name == "low":
            return cls.low(DEFAULT_LOW_TAU if tau is None else tau)
        if name == "custom":
            if tau is None:
                raise ValueError("custom threshold policy needs tau")
            return cls.custom(tau)
        raise ValueError(f"unknown threshold policy {name!r}")


@dataclass(frozen=True)
class TumorCandidate:
    id: int
    voxel_indices: np.ndarray  # (n, 3) int, row-major sorted
    bbox: Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int]]  # inclusive (lo, hi) per axis
    centroid_voxel: Tuple[float, float, float]
    centroid_mm: Tuple[float, float, float]
    volume_mm3: float
    region: AnatomicalRegion
    mean_confidence: float

    @property
    def n_voxels(self) -> int:
        return int(self.voxel_indices.shape[0])

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "region": self.region.value,
            "n_voxels": self.n_voxels,
            "volume_mm3": self.volume_mm3,
            "centroid_voxel": list(self.centroid_voxel),
            "centroid_mm": list(self.centroid_mm),
            "bbox": [list(b) for b in self.bbox],
            "mean_confidence": self.mean_confidence,
        }


def fuse_ensemble(members: Sequence[ConfidenceVolume]) -> ConfidenceVolume:
    """Voxelwise arithmetic mean of the ensemble members."""
    members = list(members)
    if not members:
        raise ValueError("ensemble is empty")
    geom = members[0].geometry
    for m in members[1:]:
        if not geom.same_grid(m.geometry):
            raise VolumeError("ensemble members have different geometry")
    acc = np.zeros(geom.dims, dtype=np.float64)
    for m in members:
        acc += m.data
    acc /= len(members)
    np.clip(acc, 0.0, 1.0, out=acc)
    return ConfidenceVolume(geom, acc.astype(np.float32))


def binarize(conf: ConfidenceVolume, policy: ThresholdPolicy) -> LabelVolume:
    """Foreground where confidence >= tau."""
    if not (0.0 < policy.tau < 1.0):
        raise ValueError(f"tau must lie in (0, 1), got {policy.tau}")
    mask = conf.data >= policy.tau
    return LabelVolume(conf.geometry, mask.astype(np.uint8), {0: "background", 1: "tumor"})


# --- connected components -------------------------------------------------

_BACKWARD = np.array(
    [
        (di, dj, dk)
        for di in (-1, 0, 1)
        for dj in (-1, 0, 1)
        for dk in (-1, 0, 1)
        if (di, dj, dk) < (0, 0, 0)
    ],
    dtype=np.int64,
)


@njit
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@njit
def _label_numba(mask, offsets):
    ni, nj, nk = mask.shape
    n = ni * nj * nk
    parent = np.full(n, -1, dtype=np.int64)
    for i in range(ni):
        for j in range(nj):
            for k in range(nk):
                if not mask[i, j, k]:
                    continue
                p = (i * nj + j) * nk + k
                parent[p] = p
                for o in range(offsets.shape[0]):
                    a = i + offsets[o, 0]
                    b = j + offsets[o, 1]
                    c = k + offsets[o, 2]
                    if a < 0 or b < 0 or c < 0 or a >= ni or b >= nj or c >= nk:
                        continue
                    if not mask[a, b, c]:
                        continue
                    q = (a * nj + b) * nk + c
                    rp = _find(parent, p)
                    rq = _find(parent, q)
                    if rp != rq:
                        if rp < rq:
                            parent[rq] = rp
                        else:
                            parent[rp] = rq
    out = np.zeros(n, dtype=np.int32)
    root_id = np.zeros(n, dtype=np.int32)
    count = 0
    for p in range(n):
        if parent[p] < 0:
            continue
        r = _find(parent, p)
        if root_id[r] == 0:
            count += 1
            root_id[r] = count
        out[p] = root_id[r]
    return out.reshape(mask.shape), count


def _label_numpy(mask, offsets=None):
    lab, count = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    if count == 0:
        return lab.astype(np.int32), 0
    flat = lab.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[ids[np.argsort(first, kind="stable")]] = np.arange(1, len(ids) + 1, dtype=np.int32)
    return remap[lab], int(len(ids))


def label_array(mask: np.ndarray, use_numba: bool | None = None) -> Tuple[np.ndarray, int]:
    """26-connected labeling of a boolean array; ids follow row-major first appearance."""
    mask = np.ascontiguousarray(np.asarray(mask, dtype=bool))
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        lab, count = _label_numba(mask, _BACKWARD)
        return lab, int(count)
    return _label_numpy(mask)


def label_components(binary: LabelVolume) -> Tuple[LabelVolume, int]:
    lab, count = label_array(binary.data > 0)
    ldict = {0: "background", **{i: f"component_{i}" for i in range(1, count + 1)}}
    return LabelVolume(binary.geometry, lab, ldict), count


# --- candidates -------------------------------------------------------------

def component_voxels(labels: np.ndarray, count: int) -> List[np.ndarray]:
    """Per-component (n, 3) voxel index arrays in row-major order; entry 0 unused."""
    flat = labels.ravel()
    fg = np.flatnonzero(flat)
    order = np.argsort(flat[fg], kind="stable")
    fg = fg[order]
    ids = flat[fg]
    bounds = np.searchsorted(ids, np.arange(1, count + 2))
    coords = np.stack(np.unravel_index(fg, labels.shape), axis=1)
    out: List[np.ndarray] = [np.empty((0, 3), dtype=np.intp)]
    for c in range(count):
        out.append(coords[bounds[c] : bounds[c + 1]])
    return out


def component_centroids(labels: np.ndarray, count: int) -> np.ndarray:
    """(count + 1, 3) voxel-space centroids; row 0 unused."""
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=count + 1).astype(float)
    idx = np.indices(labels.shape).reshape(3, -1)
    cents = np.zeros((count + 1, 3))
    for ax in range(3):
        cents[:, ax] = np.bincount(flat, weights=idx[ax], minlength=count + 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cents /= sizes[:, None]
    cents[0] = np.nan
    return cents


def make_candidate(
    cid: int,
    voxels: np.ndarray,
    conf_data: np.ndarray,
    geometry: VolumeGeometry,
    partition: BodyRegionPartition,
) -> TumorCandidate:
    centroid = voxels.mean(axis=0)
    cc = geometry.cc_axis
    region = region_of(int(np.floor(centroid[cc] + 0.5)), partition)
    lo = voxels.min(axis=0)
    hi = voxels.max(axis=0)
    mean_conf = float(conf_data[voxels[:, 0], voxels[:, 1], voxels[:, 2]].astype(np.float64).mean())
    return TumorCandidate(
        id=int(cid),
        voxel_indices=voxels,
        bbox=tuple((int(a), int(b)) for a, b in zip(lo, hi)),
        centroid_voxel=tuple(float(c) for c in centroid),
        centroid_mm=tuple(float(c) for c in geometry.to_physical(centroid)),
        volume_mm3=float(len(voxels) * geometry.voxel_volume),
        region=region,
        mean_confidence=mean_conf,
    )


def build_candidates(
    components: LabelVolume,
    conf: ConfidenceVolume,
    partition: BodyRegionPartition,
    min_voxels: int = 3,
) -> List[TumorCandidate]:
    """One candidate per component with at least ``min_voxels`` voxels.

    Candidate ids equal the component ids, so they index straight back
    into the component volume.
    """
    if not components.geometry.same_grid(conf.geometry):
        raise VolumeError("components and confidence volumes have different geometry")
    if min_voxels < 1:
        raise ValueError("min_voxels must be >= 1")
    count = int(components.data.max(initial=0))
    per = component_voxels(components.data, count)
    out = []
    for cid in range(1, count + 1):
        vox = per[cid]
        if len(vox) < min_voxels:
            continue
        out.append(make_candidate(cid, vox, conf.data, components.geometry, partition))
    return out


def candidates_to_json(candidates: Sequence[TumorCandidate], **extra) -> str:
    doc = dict(extra)
    doc["candidates"] = [c.to_dict() for c in candidates]
    return json.dumps(doc, indent=2, sort_keys=True)


def candidates_from_components(
    components: LabelVolume,
    conf: ConfidenceVolume,
    partition: BodyRegionPartition,
    ids: Sequence[int],
) -> List[TumorCandidate]:
    """Rebuild candidates for the given component ids (used when reading stage files)."""
    count = int(components.data.max(initial=0))
    per = component_voxels(components.data, count)
    out = []
    for cid in ids:
        if cid < 1 or cid > count or len(per[cid]) == 0:
            raise VolumeError(f"component {cid} not present in the component volume")
        out.append(make_candidate(cid, per[cid], conf.data, components.geometry, partition))
    return out

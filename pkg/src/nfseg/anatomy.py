"""Refined anatomy mask, NF high-risk zone and body-region partition."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, VolumeError

log = logging.getLogger(__name__)

DEFAULT_ZONE_RADIUS_MM = 10.0


class RefinedAnatomyLabel(IntEnum):
    background = 0
    heart = 1
    lungs = 2
    liver = 3
    stomach = 4
    kidneys = 5
    urinary_bladder = 6
    spine = 7
    sacrum = 8
    hips = 9
    femurs = 10
    muscles = 11
    high_risk_zone = 12


REFINED_DICTIONARY = {int(lbl): lbl.name for lbl in RefinedAnatomyLabel}


class AnatomicalRegion(str, Enum):
    head_neck = "head_neck"
    chest = "chest"
    abdomen = "abdomen"
    legs = "legs"


REGIONS = tuple(AnatomicalRegion)


class MappingError(ValueError):
    pass


@dataclass
class LabelMappingConfig:
    """Rules from source organ names to refined labels; ``None`` means drop."""

    rules: Dict[str, Optional[RefinedAnatomyLabel]] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "LabelMappingConfig":
        rules: Dict[str, Optional[RefinedAnatomyLabel]] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "->" not in line:
                raise MappingError(f"line {lineno}: expected 'source -> target', got {raw!r}")
            src, dst = (part.strip() for part in line.split("->", 1))
            if not src or not dst:
                raise MappingError(f"line {lineno}: empty source or target")
            if dst.upper() == "DROP":
                rules[src] = None
                continue
            try:
                rules[src] = RefinedAnatomyLabel[dst]
            except KeyError:
                raise MappingError(f"line {lineno}: unknown target label {dst!r}") from None
            if rules[src] == RefinedAnatomyLabel.high_risk_zone:
                raise MappingError(f"line {lineno}: high_risk_zone is not a mapping target")
        return cls(rules)

    @classmethod
    def load(cls, path) -> "LabelMappingConfig":
        return cls.parse(Path(path).read_text())

    @classmethod
    def default(cls) -> "LabelMappingConfig":
        text = resources.files("nfseg").joinpath("data/default_mapping.txt").read_text()
        return cls.parse(text)

    def unknown_names(self, raw: LabelVolume) -> List[str]:
        present = set(int(v) for v in np.unique(raw.data))
        return sorted(
            raw.label_dictionary[i]
            for i in present
            if i != 0 and raw.label_dictionary[i] not in self.rules
        )


def refine_anatomy_mask(
    raw: LabelVolume, mapping: LabelMappingConfig, on_unknown: str = "warn"
) -> LabelVolume:
    """Merge/drop raw organ labels into the refined 11-organ scheme.

    Voxels whose source name has no rule become background; they are
    logged (``on_unknown="warn"``) or rejected (``on_unknown="error"``).
    """
    lut = np.zeros(max(raw.label_dictionary) + 1, dtype=np.uint8)
    unknown = []
    for src_id, name in raw.label_dictionary.items():
        if src_id == 0:
            continue
        if name not in mapping.rules:
            unknown.append(name)
            continue
        target = mapping.rules[name]
        if target is None:
            continue
        if not isinstance(target, RefinedAnatomyLabel) or target == RefinedAnatomyLabel.high_risk_zone:
            raise MappingError(f"rule for {name!r} has invalid target {target!r}")
        lut[src_id] = int(target)
    if unknown:
        present_unknown = mapping.unknown_names(raw)
        if present_unknown:
            if on_unknown == "error":
                raise MappingError(f"no mapping rule for source labels {present_unknown}")
            log.warning("no mapping rule for source labels %s; set to background", present_unknown)
    return LabelVolume(raw.geometry, lut[raw.data], REFINED_DICTIONARY)


def ellipsoid_offsets(radius_mm: float, spacing) -> np.ndarray:
    """Voxel offsets whose physical length is <= radius_mm (box half-width ceil(r/s))."""
    half = [int(math.ceil(radius_mm / s)) for s in spacing]
    grids = np.meshgrid(*[np.arange(-h, h + 1) for h in half], indexing="ij")
    off = np.stack([g.ravel() for g in grids], axis=1)
    d2 = sum((off[:, a] * spacing[a]) ** 2 for a in range(3))
    return off[d2 <= radius_mm**2 * (1 + 1e-12)]


def dilate_physical(seed: np.ndarray, radius_mm: float, spacing) -> np.ndarray:
    """Ball dilation in physical units.

    A voxel is set iff some seed voxel centre lies within ``radius_mm``.
    The Euclidean distance transform gives this exactly and avoids
    stamping thousands of structuring-element offsets per seed voxel.
    """
    if not seed.any():
        return np.zeros_like(seed, dtype=bool)
    half = [int(math.ceil(radius_mm / s)) for s in spacing]
    # crop to the seed bounding box plus the element half-width
    nz = np.nonzero(seed)
    lo = [max(0, int(a.min()) - h) for a, h in zip(nz, half)]
    hi = [min(n, int(a.max()) + h + 1) for a, n, h in zip(nz, seed.shape, half)]
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    dist = ndimage.distance_transform_edt(~seed[sl], sampling=spacing)
    out = np.zeros(seed.shape, dtype=bool)
    out[sl] = dist <= radius_mm * (1 + 1e-12)
    return out


def build_high_risk_zone(refined: LabelVolume, radius_mm: float = DEFAULT_ZONE_RADIUS_MM) -> LabelVolume:
    """Add label 12 on background voxels within ``radius_mm`` of lungs or spine."""
    if not radius_mm > 0:
        raise ValueError(f"radius_mm must be positive, got {radius_mm}")
    data = refined.data
    seed = (data == RefinedAnatomyLabel.lungs) | (data == RefinedAnatomyLabel.spine)
    if not seed.any():
        raise VolumeError("no seed structures (lungs/spine) for the high-risk zone")
    zone = dilate_physical(seed, radius_mm, refined.geometry.spacing)
    out = data.astype(np.uint8, copy=True)
    out[zone & (data == RefinedAnatomyLabel.background)] = RefinedAnatomyLabel.high_risk_zone
    return LabelVolume(refined.geometry, out, REFINED_DICTIONARY)


@dataclass(frozen=True)
class BodyRegionPartition:
    z_lung_top: int
    z_lung_bottom: int
    z_hip_bottom: int

    def __post_init__(self):
        if not (self.z_lung_top >= self.z_lung_bottom >= self.z_hip_bottom):
            raise ValueError(
                f"landmarks must satisfy lung_top >= lung_bottom >= hip_bottom, got {self}"
            )

    def to_dict(self) -> dict:
        return {
            "z_lung_top": self.z_lung_top,
            "z_lung_bottom": self.z_lung_bottom,
            "z_hip_bottom": self.z_hip_bottom,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BodyRegionPartition":
        return cls(int(d["z_lung_top"]), int(d["z_lung_bottom"]), int(d["z_hip_bottom"]))


def extract_landmarks(refined: LabelVolume) -> BodyRegionPartition:
    cc = refined.geometry.cc_axis
    other = tuple(a for a in range(3) if a != cc)
    found = {}
    for label in (RefinedAnatomyLabel.lungs, RefinedAnatomyLabel.hips):
        rows = np.flatnonzero((refined.data == label).any(axis=other))
        if rows.size == 0:
            raise VolumeError(f"anatomy mask has no {label.name} voxels")
        found[label] = rows
    lungs = found[RefinedAnatomyLabel.lungs]
    hips = found[RefinedAnatomyLabel.hips]
    return BodyRegionPartition(int(lungs.max()), int(lungs.min()), int(hips.min()))


def region_of(z: int, partition: BodyRegionPartition) -> AnatomicalRegion:
    """Region of a cranio-caudal index; boundary slices belong to the lower region."""
    if z > partition.z_lung_top:
        return AnatomicalRegion.head_neck
    if z > partition.z_lung_bottom:
        return AnatomicalRegion.chest
    if z > partition.z_hip_bottom:
        return AnatomicalRegion.abdomen
    return AnatomicalRegion.legs

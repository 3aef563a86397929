"""Deterministic synthetic whole-body phantoms.

A phantom is a coarse body outline with box/ellipsoid organs carrying
raw (pre-refinement) organ names, hyperintense ellipsoidal tumors placed
per anatomical region, and an ensemble of degraded confidence maps that
stand in for network output. False-positive blobs share their location
across ensemble members and carry a striped texture in the image.

Random streams are keyed by purpose so changing one knob does not
reshuffle the others:
``[seed, 0]`` tumors, ``[seed, 1, member]`` confidence noise,
``[seed, 2]`` false-positive blobs, ``[seed, 3]`` image noise.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .anatomy import AnatomicalRegion, BodyRegionPartition, dilate_physical
from .volume import ConfidenceVolume, ImageVolume, LabelVolume, VolumeGeometry

RAW_LABELS = {
    0: "background",
    1: "spleen",
    2: "right_kidney",
    3: "left_kidney",
    4: "gallbladder",
    5: "liver",
    6: "stomach",
    7: "pancreas",
    8: "right_adrenal_gland",
    9: "left_adrenal_gland",
    10: "left_lung",
    11: "right_lung",
    12: "heart",
    13: "aorta",
    14: "inferior_vena_cava",
    15: "portal_vein_and_splenic_vein",
    16: "left_iliac_artery",
    17: "right_iliac_artery",
    18: "left_iliac_vena",
    19: "right_iliac_vena",
    20: "esophagus",
    21: "small_bowel",
    22: "duodenum",
    23: "colon",
    24: "urinary_bladder",
    25: "spine",
    26: "sacrum",
    27: "left_hip",
    28: "right_hip",
    29: "left_femur",
    30: "right_femur",
    31: "left_autochthonous_muscle",
    32: "right_autochthonous_muscle",
    33: "left_iliopsoas_muscle",
    34: "right_iliopsoas_muscle",
    35: "left_gluteus_maximus",
    36: "right_gluteus_maximus",
    37: "left_gluteus_medius",
    38: "right_gluteus_medius",
    39: "left_gluteus_minimus",
    40: "right_gluteus_minimus",
}
_RAW_ID = {v: k for k, v in RAW_LABELS.items()}

# organs a neurofibroma cannot grow inside
NO_TUMOR_ORGANS = (
    "heart", "left_lung", "right_lung", "liver", "spleen", "stomach",
    "left_kidney", "right_kidney", "urinary_bladder",
    "left_hip", "right_hip", "left_femur", "right_femur",
)

_INTENSITY = {
    "spleen": 160.0, "right_kidney": 170.0, "left_kidney": 170.0, "gallbladder": 380.0,
    "liver": 70.0, "stomach": 140.0, "pancreas": 120.0, "right_adrenal_gland": 110.0,
    "left_adrenal_gland": 110.0, "left_lung": 15.0, "right_lung": 15.0, "heart": 130.0,
    "aorta": 40.0, "inferior_vena_cava": 40.0, "portal_vein_and_splenic_vein": 40.0,
    "esophagus": 110.0, "small_bowel": 150.0, "duodenum": 150.0, "colon": 130.0,
    "urinary_bladder": 420.0, "spine": 60.0, "sacrum": 60.0, "left_hip": 50.0,
    "right_hip": 50.0, "left_femur": 50.0, "right_femur": 50.0,
}
_MUSCLE_INTENSITY = 80.0


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    dims: Tuple[int, int, int] = (64, 256, 128)
    spacing: Tuple[float, float, float] = (7.8, 0.625, 0.625)
    # cranio-caudal landmarks as voxel indices; None derives them from dims
    lung_span: Optional[Tuple[int, int]] = None  # (bottom, top)
    hip_bottom: Optional[int] = None
    tumors_per_region: Dict[str, object] = field(
        default_factory=lambda: {"head_neck": 1, "chest": 2, "abdomen": 4, "legs": 4}
    )
    tumor_radius_mm: Tuple[float, float] = (6.0, 10.0)
    tissue_intensity: float = 100.0
    tumor_contrast: float = 250.0
    image_noise_sigma: float = 10.0
    noise_sigma: float = 0.05
    fp_blob_count: int = 0
    fp_radius_mm: Tuple[float, float] = (6.0, 10.0)
    fp_confidence: float = 0.8
    fp_stripe_period: int = 4
    fp_stripe_amplitude: float = 160.0
    blur_sigma_mm: float = 1.0
    n_members: int = 3
    margin_mm: float = 4.0
    max_retries: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        counts = {}
        for name, spec in self.tumors_per_region.items():
            AnatomicalRegion(name)
            lo, hi = (spec, spec) if np.isscalar(spec) else tuple(spec)
            if int(lo) < 0 or int(hi) < int(lo):
                raise PhantomError(f"bad tumor count for {name}: {spec!r}")
            counts[name] = spec if np.isscalar(spec) else tuple(spec)
        object.__setattr__(self, "tumors_per_region", counts)
        for rng_name in ("tumor_radius_mm", "fp_radius_mm"):
            lo, hi = getattr(self, rng_name)
            if not (0 < lo <= hi):
                raise PhantomError(f"{rng_name} must satisfy 0 < min <= max")
        if self.fp_blob_count < 0:
            raise PhantomError("fp_blob_count must be >= 0")
        if not (0 <= self.noise_sigma <= 1 / 6):
            raise PhantomError("noise_sigma must lie in [0, 1/6]")
        if self.blur_sigma_mm < 0 or self.image_noise_sigma < 0:
            raise PhantomError("blur and image noise must be >= 0")
        if self.n_members < 1:
            raise PhantomError("need at least one ensemble member")
        if not (0 < self.fp_confidence <= 1):
            raise PhantomError("fp_confidence must lie in (0, 1]")
        if min(self.dims) < 8 or self.dims[1] < 40:
            raise PhantomError(f"dims {self.dims} too small for the body layout")
        lb, lt = self.landmarks()[1], self.landmarks()[0]
        hb = self.landmarks()[2]
        if not (0 <= hb < lb < lt < self.dims[1] - 1):
            raise PhantomError("landmarks must satisfy 0 <= hip_bottom < lung_bottom < lung_top < ny - 1")

    def landmarks(self) -> Tuple[int, int, int]:
        ny = self.dims[1]
        bottom, top = self.lung_span if self.lung_span is not None else (round(0.58 * ny), round(0.80 * ny))
        hip = self.hip_bottom if self.hip_bottom is not None else round(0.30 * ny)
        return int(top), int(bottom), int(hip)

    def partition(self) -> BodyRegionPartition:
        return BodyRegionPartition(*self.landmarks())

    @property
    def geometry(self) -> VolumeGeometry:
        return VolumeGeometry(self.dims, self.spacing)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        for key in ("dims", "spacing", "tumor_radius_mm", "fp_radius_mm", "lung_span"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class PhantomBundle:
    config: PhantomConfig
    image: ImageVolume
    anatomy_raw: LabelVolume
    gt_tumors: LabelVolume
    ensemble: List[ConfidenceVolume]
    manifest: dict


# --- shapes -------------------------------------------------------------------

def _ellipsoid(dims, center, semi) -> np.ndarray:
    """Mask of (x - c)^2 / a^2 summed <= 1 in voxel units."""
    out = np.zeros(dims, dtype=bool)
    lo = [max(0, int(np.floor(c - a))) for c, a in zip(center, semi)]
    hi = [min(n, int(np.ceil(c + a)) + 1) for c, a, n in zip(center, semi, dims)]
    if any(h <= l for l, h in zip(lo, hi)):
        return out
    grids = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    d = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi))
    out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = d <= 1.0
    return out


def _cylinder(dims, center_ap, center_lr, semi_ap, semi_lr, j_lo, j_hi) -> np.ndarray:
    """Elliptic cylinder along the cranio-caudal axis, rows j_lo..j_hi inclusive."""
    out = np.zeros(dims, dtype=bool)
    i = np.arange(dims[0])[:, None]
    k = np.arange(dims[2])[None, :]
    disc = ((i - center_ap) / semi_ap) ** 2 + ((k - center_lr) / semi_lr) ** 2 <= 1.0
    j_lo, j_hi = max(0, int(j_lo)), min(dims[1] - 1, int(j_hi))
    if j_hi >= j_lo:
        out[:, j_lo : j_hi + 1, :] = disc[:, None, :]
    return out


def _box(dims, lo, hi) -> np.ndarray:
    out = np.zeros(dims, dtype=bool)
    sl = tuple(slice(max(0, int(a)), min(n, int(b) + 1)) for a, b, n in zip(lo, hi, dims))
    out[sl] = True
    return out


def ball_offsets(radius_mm: float, spacing) -> np.ndarray:
    """Voxel offsets of a physical sphere (semi-axes radius/spacing per axis)."""
    semi = [radius_mm / s for s in spacing]
    half = [int(np.floor(a)) for a in semi]
    grids = np.meshgrid(*[np.arange(-h, h + 1) for h in half], indexing="ij")
    off = np.stack([g.ravel() for g in grids], axis=1)
    d = sum((off[:, a] / semi[a]) ** 2 for a in range(3))
    return off[d <= 1.0]


# --- anatomy ------------------------------------------------------------------

def build_body_and_anatomy(config: PhantomConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(body mask, raw organ label array) for the configured layout."""
    nx, ny, nz = dims = config.dims
    top, bottom, hip = config.landmarks()
    hip_top = hip + max(4, round(0.10 * ny))
    neck = min(ny - 2, top + max(2, round(0.04 * ny)))

    body = np.zeros(dims, dtype=bool)
    body |= _cylinder(dims, 0.5 * nx, 0.5 * nz, 0.40 * nx, 0.46 * nz, hip + 1, neck)
    body |= _cylinder(dims, 0.5 * nx, 0.5 * nz, 0.30 * nx, 0.30 * nz, neck + 1, ny - 2)
    for lr in (0.27, 0.73):
        body |= _cylinder(dims, 0.5 * nx, lr * nz, 0.32 * nx, 0.21 * nz, 1, hip)

    labels = np.zeros(dims, dtype=np.uint8)

    def paint(name, mask):
        labels[mask & body] = _RAW_ID[name]

    spine_lo = hip + max(3, round(0.06 * ny))
    spine_hi = round(0.95 * ny) - 1
    # muscles first so bones and organs paint over their edges
    for side, lr in (("left", 0.64), ("right", 0.36)):
        paint(f"{side}_autochthonous_muscle",
              _cylinder(dims, 0.13 * nx, lr * nz, 0.06 * nx, 0.07 * nz, spine_lo, top))
        paint(f"{side}_iliopsoas_muscle",
              _cylinder(dims, 0.36 * nx, (0.5 + (lr - 0.5) * 0.7) * nz, 0.05 * nx, 0.05 * nz,
                        hip + 2, bottom - round(0.08 * ny)))
    for side, lr in (("left", 0.78), ("right", 0.22)):
        paint(f"{side}_gluteus_maximus",
              _cylinder(dims, 0.16 * nx, lr * nz, 0.06 * nx, 0.08 * nz, hip - round(0.03 * ny), hip_top))
        paint(f"{side}_gluteus_medius",
              _cylinder(dims, 0.24 * nx, (lr + (0.06 if lr > 0.5 else -0.06)) * nz, 0.05 * nx, 0.04 * nz,
                        hip + 2, hip_top))
        paint(f"{side}_gluteus_minimus",
              _cylinder(dims, 0.30 * nx, (lr + (0.1 if lr > 0.5 else -0.1)) * nz, 0.04 * nx, 0.03 * nz,
                        hip + 3, hip_top - 1))

    paint("spine", _cylinder(dims, 0.22 * nx, 0.5 * nz, 0.07 * nx, 0.07 * nz, spine_lo, spine_hi))
    paint("sacrum", _cylinder(dims, 0.24 * nx, 0.5 * nz, 0.08 * nx, 0.09 * nz, hip + 3, spine_lo - 1))
    for side, (klo, khi) in (("right", (0.16, 0.36)), ("left", (0.64, 0.84))):
        paint(f"{side}_hip", _box(dims, (0.38 * nx, hip, klo * nz), (0.60 * nx, hip_top, khi * nz)))
    for side, lr in (("right", 0.27), ("left", 0.73)):
        paint(f"{side}_femur",
              _cylinder(dims, 0.5 * nx, lr * nz, 0.07 * nx, 0.05 * nz, round(0.03 * ny), hip - 2))

    # lungs: ellipsoids clipped to exactly [bottom, top]; clipping guarantees the landmarks
    half = (top - bottom) / 2.0
    lung_rows = np.zeros(dims, dtype=bool)
    lung_rows[:, bottom : top + 1, :] = True
    for side, lr in (("right", 0.30), ("left", 0.70)):
        lung = _ellipsoid(dims, (0.5 * nx, bottom + half, lr * nz), (0.24 * nx, half + 2.0, 0.16 * nz))
        paint(f"{side}_lung", lung & lung_rows)
    paint("heart", _ellipsoid(dims, (0.66 * nx, bottom + 0.35 * (top - bottom), 0.56 * nz),
                              (0.14 * nx, 0.22 * (top - bottom), 0.12 * nz)))
    paint("esophagus", _cylinder(dims, 0.32 * nx, 0.5 * nz, 0.03 * nx, 0.025 * nz, bottom - 4, neck))
    paint("aorta", _cylinder(dims, 0.33 * nx, 0.45 * nz, 0.035 * nx, 0.03 * nz, hip + 6, top - 4))
    paint("inferior_vena_cava", _cylinder(dims, 0.36 * nx, 0.57 * nz, 0.035 * nx, 0.03 * nz, hip + 6, bottom))

    ab = bottom - hip
    z = lambda f: hip + f * ab  # noqa: E731
    paint("liver", _ellipsoid(dims, (0.55 * nx, z(0.82), 0.30 * nz), (0.22 * nx, 0.16 * ab, 0.15 * nz)))
    paint("gallbladder", _ellipsoid(dims, (0.68 * nx, z(0.70), 0.34 * nz), (0.05 * nx, 0.04 * ab, 0.04 * nz)))
    paint("stomach", _ellipsoid(dims, (0.62 * nx, z(0.82), 0.68 * nz), (0.12 * nx, 0.10 * ab, 0.10 * nz)))
    paint("spleen", _ellipsoid(dims, (0.35 * nx, z(0.85), 0.80 * nz), (0.08 * nx, 0.08 * ab, 0.06 * nz)))
    paint("pancreas", _ellipsoid(dims, (0.45 * nx, z(0.70), 0.55 * nz), (0.04 * nx, 0.04 * ab, 0.12 * nz)))
    for side, lr in (("right", 0.35), ("left", 0.65)):
        paint(f"{side}_kidney", _ellipsoid(dims, (0.30 * nx, z(0.62), lr * nz), (0.07 * nx, 0.09 * ab, 0.06 * nz)))
        paint(f"{side}_adrenal_gland",
              _ellipsoid(dims, (0.30 * nx, z(0.74), lr * nz), (0.03 * nx, 0.02 * ab, 0.03 * nz)))
    paint("duodenum", _ellipsoid(dims, (0.55 * nx, z(0.62), 0.45 * nz), (0.05 * nx, 0.05 * ab, 0.05 * nz)))
    paint("small_bowel", _ellipsoid(dims, (0.68 * nx, z(0.40), 0.50 * nz), (0.12 * nx, 0.12 * ab, 0.15 * nz)))
    paint("colon", _ellipsoid(dims, (0.70 * nx, z(0.55), 0.25 * nz), (0.06 * nx, 0.15 * ab, 0.05 * nz)))
    paint("urinary_bladder", _ellipsoid(dims, (0.66 * nx, z(0.12), 0.5 * nz), (0.09 * nx, 0.07 * ab, 0.08 * nz)))
    for side, lr in (("right", 0.42), ("left", 0.58)):
        paint(f"{side}_iliac_artery", _cylinder(dims, 0.40 * nx, lr * nz, 0.02 * nx, 0.02 * nz, hip + 2, hip + 6))
        paint(f"{side}_iliac_vena", _cylinder(dims, 0.42 * nx, (lr + (0.04 if lr > 0.5 else -0.04)) * nz,
                                              0.02 * nx, 0.02 * nz, hip + 2, hip + 6))
    paint("portal_vein_and_splenic_vein",
          _cylinder(dims, 0.48 * nx, 0.52 * nz, 0.02 * nx, 0.06 * nz, round(z(0.74)), round(z(0.78))))
    return body, labels


def region_rows(partition: BodyRegionPartition, ny: int, region: AnatomicalRegion) -> Tuple[int, int]:
    """Inclusive cranio-caudal index range whose voxels map to ``region``."""
    r = AnatomicalRegion(region)
    if r is AnatomicalRegion.head_neck:
        return partition.z_lung_top + 1, ny - 1
    if r is AnatomicalRegion.chest:
        return partition.z_lung_bottom + 1, partition.z_lung_top
    if r is AnatomicalRegion.abdomen:
        return partition.z_hip_bottom + 1, partition.z_lung_bottom
    return 0, partition.z_hip_bottom


# --- placement ------------------------------------------------------------------

def _place_blobs(rng, allowed, occupied, region_list, radius_range, config, what):
    """Place one physical ball per requested region; returns records and the updated occupancy."""
    dims = config.dims
    part = config.partition()
    sp = config.spacing
    body_extent_mm = [d * s for d, s in zip(dims, sp)]
    records = []
    for region in region_list:
        lo_j, hi_j = region_rows(part, dims[1], region)
        for attempt in range(config.max_retries):
            r = float(rng.uniform(*radius_range))
            if 2 * r >= min(body_extent_mm[0], body_extent_mm[2]):
                raise PhantomError(f"{what} radius {r:.1f} mm exceeds the body extent")
            off = ball_offsets(r, sp)
            center = np.array([
                rng.integers(0, dims[0]),
                rng.integers(lo_j, hi_j + 1),
                rng.integers(0, dims[2]),
            ])
            vox = off + center
            if (vox < 0).any() or (vox >= np.array(dims)).any():
                continue
            ii, jj, kk = vox.T
            if not allowed[ii, jj, kk].all() or occupied[ii, jj, kk].any():
                continue
            # keep a gap of at least one voxel and margin_mm from everything placed later
            lo = np.maximum(vox.min(axis=0) - 1, 0)
            hi = np.minimum(vox.max(axis=0) + 2, dims)
            box = tuple(slice(a, b) for a, b in zip(lo, hi))
            occupied[box] = True
            if config.margin_mm > 0:
                blob = np.zeros(dims, dtype=bool)
                blob[ii, jj, kk] = True
                occupied |= dilate_physical(blob, config.margin_mm, sp)
            records.append({
                "region": AnatomicalRegion(region).value,
                "center": [int(c) for c in center],
                "radius_mm": r,
                "n_voxels": int(len(vox)),
                "voxels": vox,
            })
            break
        else:
            raise PhantomError(
                f"could not place {what} in region {AnatomicalRegion(region).value} "
                f"after {config.max_retries} attempts"
            )
    return records


def _placement_context(config: PhantomConfig):
    body, raw = build_body_and_anatomy(config)
    forbidden = np.isin(raw, [_RAW_ID[n] for n in NO_TUMOR_ORGANS])
    return body, raw, body & ~forbidden


def _tumor_records(config: PhantomConfig, allowed) -> Tuple[list, np.ndarray]:
    rng = np.random.default_rng([config.seed, 0])
    regions = []
    for r in AnatomicalRegion:
        spec = config.tumors_per_region.get(r.value, 0)
        n = int(spec) if np.isscalar(spec) else int(rng.integers(spec[0], spec[1] + 1))
        regions += [r] * n
    occupied = np.zeros(config.dims, dtype=bool)
    records = _place_blobs(rng, allowed, occupied, regions, config.tumor_radius_mm, config, "tumor")
    return records, occupied


def _fp_records(config: PhantomConfig, allowed, occupied) -> list:
    rng = np.random.default_rng([config.seed, 2])
    regions = [list(AnatomicalRegion)[int(i)] for i in rng.integers(0, 4, size=config.fp_blob_count)]
    return _place_blobs(rng, allowed, occupied.copy(), regions, config.fp_radius_mm, config, "false-positive blob")


def fp_blob_mask(config: PhantomConfig, gt: Optional[LabelVolume] = None) -> np.ndarray:
    """Voxel mask of the injected false-positive blobs (identical for every member)."""
    if config.fp_blob_count == 0:
        return np.zeros(config.dims, dtype=bool)
    _, _, allowed = _placement_context(config)
    records, occupied = _tumor_records(config, allowed)
    mask = np.zeros(config.dims, dtype=bool)
    for rec in _fp_records(config, allowed, occupied):
        mask[tuple(rec["voxels"].T)] = True
    if gt is not None and (mask & (gt.data > 0)).any():
        raise PhantomError("false-positive blobs overlap the ground truth")
    return mask


# --- confidence ---------------------------------------------------------------

def degrade_to_confidence(
    gt: LabelVolume, config: PhantomConfig, member_index: int, fp_mask: Optional[np.ndarray] = None
) -> ConfidenceVolume:
    """Synthetic network output for one ensemble member.

    ``clean = max(blur(gt), fp_confidence on FP blobs)``. Noise is a
    zero-mean Gaussian truncated at 3 sigma, and the clean map is first
    squeezed into [3 sigma, 1 - 3 sigma] so clamping never biases the
    noise. The squeeze is symmetric about 0.5, so the 0.5 threshold sees
    the clean map unchanged when sigma = 0.
    """
    base = (gt.data > 0).astype(np.float64)
    if config.blur_sigma_mm > 0:
        sig = [config.blur_sigma_mm / s for s in gt.geometry.spacing]
        base = ndimage.gaussian_filter(base, sigma=sig, mode="constant", truncate=4.0)
    if fp_mask is None:
        fp_mask = fp_blob_mask(config, gt)
    if fp_mask.any():
        base[fp_mask] = np.maximum(base[fp_mask], config.fp_confidence)
    s = config.noise_sigma
    if s > 0:
        rng = np.random.default_rng([config.seed, 1, int(member_index)])
        noise = np.clip(rng.standard_normal(base.shape) * s, -3 * s, 3 * s)
        base = 3 * s + (1 - 6 * s) * base + noise
    return ConfidenceVolume(gt.geometry, np.clip(base, 0.0, 1.0).astype(np.float32))


# --- image -----------------------------------------------------------------------

def _image(config, body, raw, tumors, fps) -> np.ndarray:
    img = np.zeros(config.dims, dtype=np.float64)
    img[body] = config.tissue_intensity
    for lid, name in RAW_LABELS.items():
        if lid == 0:
            continue
        m = raw == lid
        if m.any():
            img[m] = _INTENSITY.get(name, _MUSCLE_INTENSITY)
    for rec in tumors:
        img[tuple(rec["voxels"].T)] = config.tissue_intensity + config.tumor_contrast
    period = max(2, int(config.fp_stripe_period))
    for rec in fps:
        vox = rec["voxels"]
        stripe = (vox[:, 2] // (period // 2)) % 2
        mean = config.tissue_intensity + 0.6 * config.tumor_contrast
        img[tuple(vox.T)] = mean + config.fp_stripe_amplitude * (stripe - 0.5)
    if config.image_noise_sigma > 0:
        rng = np.random.default_rng([config.seed, 3])
        img += rng.standard_normal(img.shape) * config.image_noise_sigma
    return img.astype(np.float32)


def generate_phantom(config: PhantomConfig = PhantomConfig()) -> PhantomBundle:
    """Build image, raw anatomy, tumor ground truth and the confidence ensemble."""
    geom = config.geometry
    body, raw, allowed = _placement_context(config)
    tumors, occupied = _tumor_records(config, allowed)
    fps = _fp_records(config, allowed, occupied) if config.fp_blob_count else []

    gt = np.zeros(config.dims, dtype=np.uint8)
    for rec in tumors:
        gt[tuple(rec["voxels"].T)] = 1
    fp_mask = np.zeros(config.dims, dtype=bool)
    for rec in fps:
        fp_mask[tuple(rec["voxels"].T)] = True

    gt_vol = LabelVolume(geom, gt, {0: "background", 1: "tumor"})
    present = {int(v) for v in np.unique(raw)}
    raw_vol = LabelVolume(geom, raw, {k: v for k, v in RAW_LABELS.items() if k in present or k == 0})
    image = ImageVolume(geom, _image(config, body, raw, tumors, fps))
    ensemble = [degrade_to_confidence(gt_vol, config, m, fp_mask) for m in range(config.n_members)]

    strip = lambda recs: [{k: v for k, v in r.items() if k != "voxels"} for r in recs]  # noqa: E731
    top, bottom, hip = config.landmarks()
    manifest = {
        "config": config.to_dict(),
        "landmarks": {"z_lung_top": top, "z_lung_bottom": bottom, "z_hip_bottom": hip},
        "tumors": [dict(id=i + 1, **r) for i, r in enumerate(strip(tumors))],
        "fp_blobs": [dict(id=i + 1, **r) for i, r in enumerate(strip(fps))],
    }
    return PhantomBundle(config, image, raw_vol, gt_vol, ensemble, manifest)


def noiseless(config: PhantomConfig) -> PhantomConfig:
    """Same layout with every degradation switched off."""
    return replace(config, noise_sigma=0.0, blur_sigma_mm=0.0, fp_blob_count=0, image_noise_sigma=0.0)

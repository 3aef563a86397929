"""Anisotropic 3D volumes shared by every stage.

Volumes are stored in one canonical orientation: grid axis 0 runs
anterior-posterior (anterior increasing), axis 1 runs cranio-caudal
(superior increasing) and axis 2 runs laterally (left increasing). Data
arrays are C-ordered with shape ``dims``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Tuple, Union

import numpy as np

AXIS_ROLES = ("anterior_posterior", "cranio_caudal", "lateral")
CC_AXIS = 1


class VolumeError(ValueError):
    """Invalid volume contents or geometry."""


@dataclass(frozen=True)
class VolumeGeometry:
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis_roles: Tuple[str, str, str] = AXIS_ROLES

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise VolumeError("geometry needs three dims, spacings and origin coordinates")
        if any(d < 1 for d in dims):
            raise VolumeError(f"dims must be >= 1, got {dims}")
        if any(not (s > 0) or not math.isfinite(s) for s in spacing):
            raise VolumeError(f"spacing must be positive, got {spacing}")
        if sorted(self.axis_roles) != sorted(AXIS_ROLES):
            raise VolumeError(f"axis_roles must be a permutation of {AXIS_ROLES}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "axis_roles", tuple(self.axis_roles))

    @property
    def voxel_volume(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def cc_axis(self) -> int:
        return self.axis_roles.index("cranio_caudal")

    def same_grid(self, other: "VolumeGeometry") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-6)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-4)
        )

    def to_physical(self, index) -> np.ndarray:
        """Physical mm position of a (possibly fractional) voxel index.

        Coordinates are in the canonical frame (anterior, superior, left),
        so ``origin`` is the position of voxel (0, 0, 0) in that frame.
        """
        index = np.asarray(index, dtype=float)
        return np.asarray(self.origin) + index * np.asarray(self.spacing)


def _check_grid(geometry: VolumeGeometry, data: np.ndarray) -> np.ndarray:
    data = np.asarray(data)
    if data.shape != geometry.dims:
        raise VolumeError(f"data shape {data.shape} does not match dims {geometry.dims}")
    return data


def _frozen(data: np.ndarray) -> np.ndarray:
    if data.flags.writeable or not data.flags.c_contiguous:
        data = np.array(data, order="C", copy=True)
        data.setflags(write=False)
    return data


@dataclass(frozen=True)
class ImageVolume:
    geometry: VolumeGeometry
    data: np.ndarray

    def __post_init__(self):
        data = _check_grid(self.geometry, self.data)
        if data.dtype.kind not in "uif":
            raise VolumeError(f"unsupported image dtype {data.dtype}")
        if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
            raise VolumeError("image contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))


@dataclass(frozen=True)
class LabelVolume:
    geometry: VolumeGeometry
    data: np.ndarray
    label_dictionary: Dict[int, str] = field(default_factory=lambda: {0: "background"})

    def __post_init__(self):
        data = _check_grid(self.geometry, self.data)
        if data.dtype.kind not in "ui":
            raise VolumeError(f"label data must be integral, got {data.dtype}")
        ldict = {int(k): str(v) for k, v in self.label_dictionary.items()}
        if ldict.get(0) != "background":
            raise VolumeError('label 0 must be named "background"')
        present = np.unique(data)
        missing = [int(v) for v in present if int(v) not in ldict]
        if missing:
            raise VolumeError(f"labels {missing} missing from label_dictionary")
        object.__setattr__(self, "label_dictionary", dict(sorted(ldict.items())))
        object.__setattr__(self, "data", _frozen(data))

    def mask(self, label: int) -> np.ndarray:
        return self.data == label


@dataclass(frozen=True)
class ConfidenceVolume:
    geometry: VolumeGeometry
    data: np.ndarray

    def __post_init__(self):
        data = _check_grid(self.geometry, self.data)
        if data.dtype.kind != "f":
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)) or data.min(initial=0) < 0 or data.max(initial=0) > 1:
            raise VolumeError("confidence out of range")
        object.__setattr__(self, "data", _frozen(data))


Volume = Union[ImageVolume, LabelVolume, ConfidenceVolume]


def binary_label_volume(geometry: VolumeGeometry, mask: np.ndarray, name: str = "foreground") -> LabelVolume:
    return LabelVolume(geometry, np.asarray(mask).astype(np.uint8), {0: "background", 1: name})


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _source_positions(n_in: int, s_in: float, t: float, n_out: int) -> np.ndarray:
    # voxel-centre alignment; identical spacing yields integer positions
    if s_in == t and n_in == n_out:
        return np.arange(n_out, dtype=float)
    ratio = t / s_in
    return (np.arange(n_out) + 0.5) * ratio - 0.5


def _linear_axis(data: np.ndarray, pos: np.ndarray, axis: int) -> np.ndarray:
    n = data.shape[axis]
    pos = np.clip(pos, 0, n - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    w = pos - lo
    a = np.take(data, lo, axis=axis)
    b = np.take(data, hi, axis=axis)
    shape = [1, 1, 1]
    shape[axis] = len(pos)
    w = w.reshape(shape)
    return a * (1.0 - w) + b * w


def resample(volume: Volume, target_spacing, mode: str = "linear") -> Volume:
    """Resample onto a new spacing keeping the physical extent.

    Output dims are ``round_half_up(dims * spacing / target_spacing)``,
    at least 1. ``nearest`` picks ``floor(pos + 0.5)`` per axis, so it is
    separable and only ever copies input values.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or any(not (t > 0) for t in target):
        raise VolumeError(f"target spacing must be positive, got {target_spacing}")
    if mode not in ("linear", "nearest"):
        raise VolumeError(f"unknown resampling mode {mode!r}")
    if isinstance(volume, LabelVolume) and mode == "linear":
        raise VolumeError("linear resampling is not allowed for label volumes")

    geom = volume.geometry
    if target == geom.spacing:
        return volume
    dims_out = tuple(
        max(1, round_half_up(n * s / t)) for n, s, t in zip(geom.dims, geom.spacing, target)
    )
    positions = [
        _source_positions(n, s, t, m) for n, s, t, m in zip(geom.dims, geom.spacing, target, dims_out)
    ]
    if mode == "nearest":
        idx = [
            np.clip(np.floor(p + 0.5).astype(np.intp), 0, n - 1) for p, n in zip(positions, geom.dims)
        ]
        out = volume.data[np.ix_(*idx)]
    else:
        out = volume.data.astype(np.float64)
        for axis, p in enumerate(positions):
            out = _linear_axis(out, p, axis)
        if isinstance(volume, ConfidenceVolume):
            out = np.clip(out, 0.0, 1.0)
        out = out.astype(volume.data.dtype if volume.data.dtype.kind == "f" else np.float32)

    origin = tuple(
        o + p[0] * s for o, p, s in zip(geom.origin, positions, geom.spacing)
    )
    new_geom = replace(geom, dims=dims_out, spacing=target, origin=origin)
    if isinstance(volume, LabelVolume):
        return LabelVolume(new_geom, out, volume.label_dictionary)
    return type(volume)(new_geom, out)


def zscore_normalize(image: ImageVolume) -> ImageVolume:
    """Zero mean, unit population std. Constant images map to all zeros."""
    x = image.data.astype(np.float64)
    mu = x.mean()
    sd = x.std()
    if sd == 0 or not np.isfinite(sd):
        return ImageVolume(image.geometry, np.zeros(image.geometry.dims, dtype=np.float64))
    z = (x - mu) / sd
    # second pass removes the residual rounding in mean/std
    z = (z - z.mean()) / z.std()
    return ImageVolume(image.geometry, z)


def rescale_labels_unit(labels: LabelVolume) -> ImageVolume:
    """Map label ids to [0, 1] by dividing by the largest id in the dictionary."""
    top = max(labels.label_dictionary)
    if top == 0:
        raise VolumeError("no foreground labels")
    return ImageVolume(labels.geometry, labels.data.astype(np.float64) / float(top))

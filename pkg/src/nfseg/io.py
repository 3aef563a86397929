"""NIfTI-1 reading and writing in the canonical orientation."""
from __future__ import annotations

import gzip
import json
import os
from pathlib import Path

import nibabel as nib
import numpy as np
from nibabel import orientations as ornt_mod

from .volume import (
    ConfidenceVolume,
    ImageVolume,
    LabelVolume,
    Volume,
    VolumeError,
    VolumeGeometry,
)

# index increases toward anterior, superior, left
CANONICAL_AXCODES = ("A", "S", "L")
SUPPORTED_DTYPES = {
    np.dtype(np.uint8),
    np.dtype(np.int16),
    np.dtype(np.int32),
    np.dtype(np.float32),
    np.dtype(np.float64),
}
_LABEL_EXT_CODE = 6  # NIfTI "comment" extension
_LABEL_EXT_KEY = "nfseg_label_dictionary"


class VolumeIOError(VolumeError):
    """A file could not be read or written as a volume."""


def _snap(v) -> float:
    # header fields are float32; recover the short decimal that was written
    return float(str(np.float32(v)))


def _canonical_affine(geom: VolumeGeometry) -> np.ndarray:
    sa, ss, sl = geom.spacing
    oa, os_, ol = geom.origin
    aff = np.zeros((4, 4))
    aff[1, 0] = sa  # axis 0 -> +y (anterior)
    aff[2, 1] = ss  # axis 1 -> +z (superior)
    aff[0, 2] = -sl  # axis 2 -> -x (left)
    aff[:3, 3] = (-ol, oa, os_)
    aff[3, 3] = 1.0
    return aff


def _label_dictionary_from(img) -> dict | None:
    for ext in img.header.extensions:
        if ext.get_code() != _LABEL_EXT_CODE:
            continue
        try:
            payload = json.loads(ext.get_content().decode("utf-8").rstrip("\x00"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            continue
        if isinstance(payload, dict) and _LABEL_EXT_KEY in payload:
            return {int(k): v for k, v in payload[_LABEL_EXT_KEY].items()}
    return None


def read_volume(path, kind: str = "image") -> Volume:
    """Load a NIfTI-1 file and reorient it to (anterior, superior, left).

    ``kind`` is one of ``image``, ``label`` or ``confidence``. Label files
    written by :func:`write_volume` carry their label dictionary in a header
    extension; other label files get generic names.
    """
    if kind not in ("image", "label", "confidence"):
        raise ValueError(f"unknown volume kind {kind!r}")
    path = Path(path)
    if not path.is_file():
        raise VolumeIOError(f"no such file: {path}")
    try:
        img = nib.load(str(path))
        if not isinstance(img, nib.Nifti1Image):
            raise VolumeIOError(f"{path} is not a NIfTI-1 file")
        dtype = img.header.get_data_dtype()
        if dtype not in SUPPORTED_DTYPES:
            raise VolumeIOError(f"unsupported datatype {dtype}")
        data = np.asanyarray(img.dataobj)
    except VolumeIOError:
        raise
    except Exception as exc:  # nibabel raises a zoo of types for bad headers
        raise VolumeIOError(f"malformed NIfTI header in {path}: {exc}") from exc

    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise VolumeIOError(f"expected a 3D volume, got shape {data.shape}")

    affine = img.affine
    transform = ornt_mod.ornt_transform(
        ornt_mod.io_orientation(affine), ornt_mod.axcodes2ornt(CANONICAL_AXCODES)
    )
    data = ornt_mod.apply_orientation(data, transform)
    affine = affine @ ornt_mod.inv_ornt_aff(transform, img.shape[:3])
    spacing = tuple(_snap(v) for v in np.linalg.norm(affine[:3, :3], axis=0))
    x, y, z = affine[:3, 3]
    geom = VolumeGeometry(data.shape, spacing, (_snap(y), _snap(z), _snap(-x)))
    data = np.ascontiguousarray(data)

    if kind == "image":
        return ImageVolume(geom, data)
    if kind == "confidence":
        if data.dtype.kind != "f":
            data = data.astype(np.float32)
        return ConfidenceVolume(geom, data)

    if data.dtype.kind == "f":
        if not np.all(np.isfinite(data)) or not np.array_equal(data, np.round(data)):
            raise VolumeIOError("label volume contains non-integral values")
        data = data.astype(np.int32)
    if data.min(initial=0) < 0:
        raise VolumeIOError("label volume contains negative values")
    ldict = _label_dictionary_from(img)
    if ldict is None:
        ldict = {int(v): ("background" if v == 0 else f"label_{int(v)}") for v in np.unique(data)}
        ldict[0] = "background"
    return LabelVolume(geom, data, ldict)


def _nifti_dtype(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.bool_:
        return data.astype(np.uint8)
    if data.dtype in SUPPORTED_DTYPES:
        return data
    if data.dtype.kind in "ui":
        hi = int(data.max(initial=0))
        lo = int(data.min(initial=0))
        for cand in (np.uint8, np.int16, np.int32):
            info = np.iinfo(cand)
            if info.min <= lo and hi <= info.max:
                return data.astype(cand)
    raise VolumeIOError(f"cannot store dtype {data.dtype} in NIfTI-1")


def to_nifti(volume: Volume) -> nib.Nifti1Image:
    data = _nifti_dtype(np.asarray(volume.data))
    affine = _canonical_affine(volume.geometry)
    img = nib.Nifti1Image(data, affine)
    img.header.set_data_dtype(data.dtype)
    img.header.set_xyzt_units("mm")
    img.set_qform(affine, code=1)
    img.set_sform(affine, code=1)
    if isinstance(volume, LabelVolume):
        payload = json.dumps(
            {_LABEL_EXT_KEY: {str(k): v for k, v in volume.label_dictionary.items()}},
            sort_keys=True,
        ).encode("utf-8")
        img.header.extensions.append(nib.nifti1.Nifti1Extension(_LABEL_EXT_CODE, payload))
    return img


def write_volume(volume: Volume, path) -> None:
    """Write ``volume`` as NIfTI-1; ``.gz`` suffix selects gzip.

    Gzip output uses a zero timestamp so identical volumes produce
    identical bytes.
    """
    path = Path(path)
    if not path.parent.is_dir():
        raise VolumeIOError(f"output directory does not exist: {path.parent}")
    raw = to_nifti(volume).to_bytes()
    try:
        if path.suffix == ".gz":
            with open(path, "wb") as fh, gzip.GzipFile(
                filename="", mode="wb", fileobj=fh, mtime=0, compresslevel=6
            ) as gz:
                gz.write(raw)
        else:
            with open(path, "wb") as fh:
                fh.write(raw)
    except OSError as exc:
        raise VolumeIOError(f"cannot write {path}: {exc}") from exc


def is_nifti(path) -> bool:
    name = os.fspath(path)
    return name.endswith(".nii") or name.endswith(".nii.gz")

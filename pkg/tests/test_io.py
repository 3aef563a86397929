import gzip

import nibabel as nib
import numpy as np
import pytest

from nfseg.io import VolumeIOError, read_volume, write_volume
from nfseg.volume import ImageVolume, LabelVolume, VolumeError, VolumeGeometry


def save(tmp_path, data, affine, name="v.nii.gz"):
    p = tmp_path / name
    nib.save(nib.Nifti1Image(data, affine), str(p))
    return p


def reorientation_oracle(data, affine, vol):
    """Map every stored voxel through the affine and look it up in the loaded volume."""
    g = vol.geometry
    for idx in np.ndindex(data.shape):
        x, y, z = (affine @ np.array([*idx, 1.0]))[:3]
        pos = np.array([y, z, -x])  # RAS world -> (anterior, superior, left)
        out = np.rint((pos - np.array(g.origin)) / np.array(g.spacing)).astype(int)
        assert vol.data[tuple(out)] == data[idx]


AFFINES = {
    "ras": np.diag([1.0, 1.0, 1.0, 1.0]),
    "flip_si": np.array([[1.0, 0, 0, 0], [0, 1, 0, 0], [0, 0, -1, 5], [0, 0, 0, 1]]),
    "lps_aniso": np.array([[-0.625, 0, 0, 10], [0, -7.8, 0, 3], [0, 0, 0.625, -2], [0, 0, 0, 1]]),
    "permuted": np.array([[0, 0, 2.0, 0], [1.5, 0, 0, 0], [0, -1, 0, 7], [0, 0, 0, 1]]),
}


class TestRead:
    def test_minimal_identity(self, tmp_path):
        p = save(tmp_path, np.arange(8, dtype=np.float32).reshape(2, 2, 2), np.eye(4))
        v = read_volume(p, "image")
        assert isinstance(v, ImageVolume) and v.geometry.dims == (2, 2, 2)

    @pytest.mark.parametrize("name", sorted(AFFINES))
    def test_reorientation_matches_affine_oracle(self, tmp_path, name):
        rng = np.random.default_rng(0)
        data = rng.integers(0, 1000, (3, 4, 5)).astype(np.int16)
        p = save(tmp_path, data, AFFINES[name])
        v = read_volume(p, "image")
        reorientation_oracle(data, AFFINES[name], v)
        assert sorted(v.data.ravel()) == sorted(data.ravel())

    def test_flipped_cc_axis_reindexed(self, tmp_path):
        data = np.zeros((1, 1, 4), np.float32)
        data[0, 0, 0] = 1  # stored at the superior end
        v = read_volume(save(tmp_path, data, AFFINES["flip_si"]), "image")
        assert v.data.shape == (1, 4, 1)
        assert v.data[0, 3, 0] == 1

    def test_confidence_out_of_range(self, tmp_path):
        p = save(tmp_path, np.full((2, 2, 2), 1.5, np.float32), np.eye(4))
        with pytest.raises(VolumeError, match="confidence out of range"):
            read_volume(p, "confidence")

    def test_missing_file(self, tmp_path):
        with pytest.raises(VolumeIOError):
            read_volume(tmp_path / "nope.nii.gz")

    def test_garbage_file(self, tmp_path):
        p = tmp_path / "bad.nii.gz"
        p.write_bytes(gzip.compress(b"not a nifti header" * 30))
        with pytest.raises(VolumeIOError):
            read_volume(p)

    def test_unsupported_dtype(self, tmp_path):
        p = save(tmp_path, np.zeros((2, 2, 2), np.complex64), np.eye(4))
        with pytest.raises(VolumeIOError):
            read_volume(p)

    def test_non_integral_labels(self, tmp_path):
        p = save(tmp_path, np.full((2, 2, 2), 0.5, np.float32), np.eye(4))
        with pytest.raises(VolumeIOError):
            read_volume(p, "label")

    def test_singleton_fourth_dim(self, tmp_path):
        p = save(tmp_path, np.ones((2, 3, 4, 1), np.float32), np.eye(4))
        assert read_volume(p).geometry.dims == (3, 4, 2)  # RAS storage -> (A, S, L)


class TestRoundTrip:
    def test_image(self, tmp_path):
        rng = np.random.default_rng(1)
        g = VolumeGeometry((4, 4, 4), (7.8, 0.625, 0.625), (1.5, -20.25, 3.0))
        v = ImageVolume(g, rng.normal(size=(4, 4, 4)).astype(np.float32))
        write_volume(v, tmp_path / "a.nii.gz")
        back = read_volume(tmp_path / "a.nii.gz")
        assert np.array_equal(back.data, v.data) and back.data.dtype == v.data.dtype
        assert back.geometry == g

    def test_labels_keep_dictionary(self, tmp_path):
        data = np.zeros((3, 3, 3), np.uint8)
        data[0, 0, 0], data[1, 1, 1] = 3, 12
        v = LabelVolume(VolumeGeometry((3, 3, 3), (1, 2, 3)), data, {0: "background", 3: "liver", 12: "zone"})
        write_volume(v, tmp_path / "l.nii")
        back = read_volume(tmp_path / "l.nii", "label")
        assert np.array_equal(back.data, data)
        assert back.label_dictionary == v.label_dictionary

    def test_gzip_output_is_deterministic(self, tmp_path):
        v = ImageVolume(VolumeGeometry((2, 2, 2), (1, 1, 1)), np.ones((2, 2, 2), np.float32))
        write_volume(v, tmp_path / "a.nii.gz")
        write_volume(v, tmp_path / "b.nii.gz")
        assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()

    def test_missing_directory(self, tmp_path):
        v = ImageVolume(VolumeGeometry((2, 2, 2), (1, 1, 1)), np.ones((2, 2, 2)))
        with pytest.raises(VolumeIOError):
            write_volume(v, tmp_path / "absent" / "x.nii.gz")

import numpy as np
import pytest

from protoseg import nifti
from protoseg.errors import DataError


@pytest.mark.parametrize("dtype", [np.float32, np.int16, np.uint8])
def test_roundtrip(tmp_path, dtype):
    rng = np.random.default_rng(0)
    if np.issubdtype(dtype, np.floating):
        data = rng.standard_normal((5, 6, 7)).astype(dtype)
    else:
        data = rng.integers(0, 4, size=(5, 6, 7)).astype(dtype)
    path = tmp_path / "v.nii"
    nifti.write(path, data, spacing=(1.0, 2.0, 3.0))
    back, spacing = nifti.read(path)
    np.testing.assert_array_equal(back, data)
    assert spacing == (1.0, 2.0, 3.0)


def test_gzip_roundtrip_and_determinism(tmp_path):
    data = np.arange(60, dtype=np.float32).reshape(3, 4, 5)
    p1, p2 = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
    nifti.write(p1, data)
    nifti.write(p2, data)
    assert p1.read_bytes() == p2.read_bytes()
    back, _ = nifti.read(p1)
    np.testing.assert_array_equal(back, data)


def test_rejects_garbage(tmp_path):
    p = tmp_path / "bad.nii"
    p.write_bytes(b"\x00" * 100)
    with pytest.raises(DataError):
        nifti.read(p)
    p.write_bytes(b"\x07" * 400)
    with pytest.raises(DataError):
        nifti.read(p)


def test_rejects_non_3d(tmp_path):
    with pytest.raises(DataError):
        nifti.write(tmp_path / "x.nii", np.zeros((4, 4)))

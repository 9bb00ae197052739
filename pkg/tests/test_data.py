import numpy as np
import pytest

from protoseg.config import MODALITIES, AugmentPolicy
from protoseg.data import (ModalVolume, MultiModalCase, augment_case,
                           identity_policy, load_case, normalize_case,
                           read_manifest, remap_labels, restore_raw_labels,
                           save_case, write_manifest)
from protoseg.errors import (ConfigError, CropTooLarge, EmptyBrainMask,
                             LabelDomainError, MissingModality, ShapeMismatch)
from protoseg.metrics import compose_regions


def make_case(shape=(16, 16, 16), labels=True, seed=0):
    rng = np.random.default_rng(seed)
    volumes = {}
    for m in MODALITIES:
        vox = rng.uniform(1.0, 5.0, size=shape).astype(np.float32)
        vox[:2] = 0.0  # a slab outside the brain
        volumes[m] = ModalVolume(m, vox, vox != 0)
    lab = rng.integers(0, 4, size=shape) if labels else None
    return MultiModalCase("synthetic", volumes, lab)


# -- loading -----------------------------------------------------------------

def test_load_roundtrip_preserves_case(tmp_path, phantom_case16):
    save_case(phantom_case16, tmp_path / "c0")
    loaded = load_case(tmp_path / "c0", "require")
    assert loaded.shape == phantom_case16.shape
    for m in MODALITIES:
        np.testing.assert_allclose(loaded.volumes[m].voxels,
                                   phantom_case16.volumes[m].voxels, atol=1e-6)
    np.testing.assert_array_equal(loaded.labels, phantom_case16.labels)


def test_load_remaps_raw_label_4(tmp_path, phantom_case16):
    # count voxels per raw label before the remap, compare after
    raw = restore_raw_labels(phantom_case16.labels)
    raw_counts = {v: int((raw == v).sum()) for v in (0, 1, 2, 4)}
    assert raw_counts[4] > 0
    save_case(phantom_case16, tmp_path / "c0")
    loaded = load_case(tmp_path / "c0", "require")
    internal_counts = {v: int((loaded.labels == v).sum()) for v in (0, 1, 2, 3)}
    assert internal_counts == {0: raw_counts[0], 1: raw_counts[1],
                               2: raw_counts[2], 3: raw_counts[4]}


def test_load_missing_modality(tmp_path, phantom_case16):
    d = save_case(phantom_case16, tmp_path / "c0")
    (d / "case16_t1ce.nii.gz").unlink()
    with pytest.raises(MissingModality) as err:
        load_case(d)
    assert err.value.modality == "t1ce"


def test_load_label_policy(tmp_path, phantom_case16):
    d = save_case(phantom_case16, tmp_path / "c0")
    (d / "case16_seg.nii.gz").unlink()
    assert load_case(d, "optional").labels is None
    with pytest.raises(MissingModality):
        load_case(d, "require")


def test_load_shape_mismatch(tmp_path, phantom_case16):
    from protoseg import nifti
    d = save_case(phantom_case16, tmp_path / "c0")
    nifti.write(d / "case16_t2.nii.gz", np.zeros((8, 8, 8), np.float32))
    with pytest.raises(ShapeMismatch):
        load_case(d)


def test_zero_labels_load_without_error(tmp_path, phantom_case16):
    from protoseg import nifti
    d = save_case(phantom_case16, tmp_path / "c0")
    nifti.write(d / "case16_seg.nii.gz",
                np.zeros(phantom_case16.shape, np.int16))
    loaded = load_case(d, "require")
    assert (loaded.labels == 0).all()


def test_remap_label_domain():
    with pytest.raises(LabelDomainError):
        remap_labels(np.array([0, 1, 3]))  # raw 3 does not exist
    with pytest.raises(LabelDomainError):
        restore_raw_labels(np.array([0, 4]))
    np.testing.assert_array_equal(remap_labels(np.array([0, 1, 2, 4])),
                                  [0, 1, 2, 3])
    np.testing.assert_array_equal(restore_raw_labels(np.array([0, 1, 2, 3])),
                                  [0, 1, 2, 4])


def test_manifest_roundtrip(tmp_path):
    p = write_manifest(tmp_path / "m.txt", ["a", "b"])
    dirs = read_manifest(p)
    assert [d.name for d in dirs] == ["a", "b"]


# -- normalization -------------------------------------------------------------

def test_normalize_mask_statistics(phantom_case16):
    normed = normalize_case(phantom_case16)
    for m in MODALITIES:
        vol = normed.volumes[m]
        inside = vol.voxels[vol.brain_mask]
        assert abs(inside.mean()) < 1e-4
        assert abs(inside.var() - 1.0) < 1e-4
        assert (vol.voxels[~vol.brain_mask] == 0).all()


def test_normalize_hand_values():
    # two mask voxels {1, 3}: mean 2, population sigma 1 -> {-1, +1}
    vox = np.zeros((2, 1, 1), np.float32)
    vox[0, 0, 0], vox[1, 0, 0] = 1.0, 3.0
    mask = np.ones_like(vox, dtype=bool)
    volumes = {m: ModalVolume(m, vox.copy(), mask.copy()) for m in MODALITIES}
    normed = normalize_case(MultiModalCase("two", volumes))
    np.testing.assert_allclose(normed.volumes["flair"].voxels[:, 0, 0],
                               [-1.0, 1.0], atol=1e-6)


def test_normalize_constant_volume_epsilon_path():
    vox = np.full((4, 4, 4), 5.0, np.float32)
    mask = np.ones_like(vox, dtype=bool)
    volumes = {m: ModalVolume(m, vox.copy(), mask.copy()) for m in MODALITIES}
    normed = normalize_case(MultiModalCase("const", volumes))
    assert (normed.volumes["t1"].voxels == 0).all()


def test_normalize_idempotent(phantom_case16):
    once = normalize_case(phantom_case16)
    twice = normalize_case(once)
    for m in MODALITIES:
        np.testing.assert_allclose(twice.volumes[m].voxels,
                                   once.volumes[m].voxels, atol=1e-6)


def test_normalize_empty_mask():
    vox = np.zeros((4, 4, 4), np.float32)
    volumes = {m: ModalVolume(m, vox.copy(), vox != 0) for m in MODALITIES}
    with pytest.raises(EmptyBrainMask):
        normalize_case(MultiModalCase("empty", volumes))


# -- augmentation ---------------------------------------------------------------

def test_augment_identity_policy():
    case = make_case()
    rng = np.random.default_rng(0)
    out = augment_case(case, identity_policy(case.shape), rng)
    for m in MODALITIES:
        np.testing.assert_array_equal(out.volumes[m].voxels, case.volumes[m].voxels)
    np.testing.assert_array_equal(out.labels, case.labels)


def test_augment_flip_involution():
    case = make_case()
    policy = AugmentPolicy(crop_size=case.shape, flip_prob=1.0,
                           intensity_shift_range=(0, 0), scale_range=(1, 1))
    once = augment_case(case, policy, np.random.default_rng(0))
    twice = augment_case(once, policy, np.random.default_rng(1))
    for m in MODALITIES:
        np.testing.assert_array_equal(twice.volumes[m].voxels,
                                      case.volumes[m].voxels)
    np.testing.assert_array_equal(twice.labels, case.labels)


def test_augment_photometric_bounds():
    # every output voxel must be s*x + t with s in [0.9, 1.1], t in [-0.1, 0.1]
    case = make_case()
    policy = AugmentPolicy(crop_size=case.shape, flip_prob=0.0,
                           intensity_shift_range=(-0.1, 0.1),
                           scale_range=(0.9, 1.1))
    out = augment_case(case, policy, np.random.default_rng(5))
    for m in MODALITIES:
        x = case.volumes[m].voxels.astype(np.float64).ravel()
        y = out.volumes[m].voxels.astype(np.float64).ravel()
        # recover s and t by least squares, then verify exactly affine
        a = np.vstack([x, np.ones_like(x)]).T
        (s, t), *_ = np.linalg.lstsq(a, y, rcond=None)
        assert 0.9 <= s <= 1.1
        assert -0.1 <= t <= 0.1
        np.testing.assert_allclose(y, s * x + t, atol=1e-4)


def test_augment_labels_follow_geometry_exactly():
    case = make_case()
    policy = AugmentPolicy(crop_size=(16, 16, 16), flip_prob=1.0,
                           intensity_shift_range=(-0.1, 0.1),
                           scale_range=(0.9, 1.1))
    out = augment_case(case, policy, np.random.default_rng(2))
    # geometric transform commutes with region composition
    wt_then = compose_regions(out.labels)["wt"]
    flipped = np.flip(compose_regions(case.labels)["wt"], axis=(0, 1, 2))
    np.testing.assert_array_equal(wt_then, flipped)
    assert set(np.unique(out.labels)) <= {0, 1, 2, 3}


def test_augment_crop_is_shared_across_modalities_and_labels():
    case = make_case(shape=(32, 16, 16))
    policy = AugmentPolicy(crop_size=(16, 16, 16), flip_prob=0.0,
                           intensity_shift_range=(0, 0), scale_range=(1, 1))
    out = augment_case(case, policy, np.random.default_rng(3))
    assert out.shape == (16, 16, 16)
    # find the crop offset from the labels and verify intensities match it
    for start in range(17):
        if np.array_equal(case.labels[start:start + 16], out.labels):
            break
    else:
        pytest.fail("crop offset not found")
    for m in MODALITIES:
        np.testing.assert_array_equal(out.volumes[m].voxels,
                                      case.volumes[m].voxels[start:start + 16])


def test_augment_crop_too_large():
    case = make_case(shape=(16, 16, 16))
    policy = AugmentPolicy(crop_size=(32, 32, 32))
    with pytest.raises(CropTooLarge):
        augment_case(case, policy, np.random.default_rng(0))


def test_augment_policy_validation():
    with pytest.raises(ConfigError):
        AugmentPolicy(crop_size=(15, 16, 16))
    with pytest.raises(ConfigError):
        AugmentPolicy(flip_prob=1.5)
    with pytest.raises(ConfigError):
        AugmentPolicy(scale_range=(1.2, 0.8))

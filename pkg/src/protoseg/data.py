"""Case ingestion, normalization, and augmentation.

A case is four co-registered volumes (flair, t1ce, t1, t2) plus an optional
label volume. On-disk layout is one directory per case holding
``<case>_<modality>.nii[.gz]`` files and optionally ``<case>_seg.nii[.gz]``;
a manifest is a plain-text file with one case directory per line.
"""

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import nifti
from .config import MODALITIES
from .errors import (CropTooLarge, EmptyBrainMask, LabelDomainError,
                     MissingModality, ShapeMismatch)

# BraTS raw labels {0,1,2,4} <-> internal contiguous classes {0,1,2,3}
RAW_LABELS = (0, 1, 2, 4)
RAW_TO_INTERNAL = {0: 0, 1: 1, 2: 2, 4: 3}
INTERNAL_TO_RAW = {v: k for k, v in RAW_TO_INTERNAL.items()}


@dataclass
class ModalVolume:
    modality: str
    voxels: np.ndarray          # (H, W, D) float32
    brain_mask: np.ndarray      # (H, W, D) bool

    def __post_init__(self):
        if self.voxels.shape != self.brain_mask.shape:
            raise ShapeMismatch(
                f"{self.modality}: voxels {self.voxels.shape} vs mask {self.brain_mask.shape}")


@dataclass
class MultiModalCase:
    case_id: str
    volumes: dict               # modality -> ModalVolume, all four present
    labels: np.ndarray | None = None   # (H, W, D) int, internal classes
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        missing = [m for m in MODALITIES if m not in self.volumes]
        if missing:
            raise MissingModality(missing[0])
        shapes = {m: v.voxels.shape for m, v in self.volumes.items()}
        if len(set(shapes.values())) != 1:
            raise ShapeMismatch(f"{self.case_id}: modality shapes differ: {shapes}")
        if self.labels is not None and self.labels.shape != self.shape:
            raise ShapeMismatch(
                f"{self.case_id}: labels {self.labels.shape} vs volumes {self.shape}")

    @property
    def shape(self):
        return self.volumes[MODALITIES[0]].voxels.shape

    def stacked(self):
        """Intensities as a (4, H, W, D) float32 array in canonical order."""
        return np.stack([self.volumes[m].voxels for m in MODALITIES]).astype(np.float32)


def remap_labels(raw):
    """BraTS raw labels {0,1,2,4} -> internal {0,1,2,3}."""
    raw = np.asarray(raw)
    bad = np.setdiff1d(np.unique(raw), RAW_LABELS)
    if bad.size:
        raise LabelDomainError(f"unknown raw label values {bad.tolist()}")
    out = raw.astype(np.int64).copy()
    out[raw == 4] = 3
    return out


def restore_raw_labels(internal):
    """Internal {0,1,2,3} -> BraTS raw {0,1,2,4}."""
    internal = np.asarray(internal)
    bad = np.setdiff1d(np.unique(internal), list(INTERNAL_TO_RAW))
    if bad.size:
        raise LabelDomainError(f"unknown internal label values {bad.tolist()}")
    out = internal.astype(np.int16).copy()
    out[internal == 3] = 4
    return out


def _find_volume(case_dir, suffix):
    hits = sorted(p for p in case_dir.iterdir()
                  if p.name.endswith((f"_{suffix}.nii", f"_{suffix}.nii.gz")))
    # guard against '_t1' matching '_t1ce'
    if suffix == "t1":
        hits = [p for p in hits if not p.name.endswith(("_t1ce.nii", "_t1ce.nii.gz"))]
    return hits[0] if hits else None


def load_case(path, label_policy="optional"):
    """Load one case directory; modality assignment is by filename suffix.

    label_policy: "require" fails when no segmentation file is present,
    "optional" loads without labels.
    """
    case_dir = Path(path)
    if not case_dir.is_dir():
        raise MissingModality(MODALITIES[0], case_dir)
    volumes = {}
    spacing = None
    for m in MODALITIES:
        f = _find_volume(case_dir, m)
        if f is None:
            raise MissingModality(m, case_dir)
        vox, sp = nifti.read(f)
        vox = vox.astype(np.float32)
        if spacing is None:
            spacing = sp
        if volumes and vox.shape != next(iter(volumes.values())).voxels.shape:
            raise ShapeMismatch(f"{case_dir.name}: {m} shape {vox.shape} differs")
        volumes[m] = ModalVolume(m, vox, vox != 0)

    labels = None
    seg = _find_volume(case_dir, "seg")
    if seg is not None:
        raw, _ = nifti.read(seg)
        if raw.shape != volumes[MODALITIES[0]].voxels.shape:
            raise ShapeMismatch(f"{case_dir.name}: seg shape {raw.shape} differs")
        labels = remap_labels(np.rint(np.asarray(raw)).astype(np.int64))
    elif label_policy == "require":
        raise MissingModality("seg", case_dir)
    return MultiModalCase(case_dir.name, volumes, labels, spacing)


def save_case(case, out_dir):
    """Write a case in the dataset layout, restoring raw BraTS label values."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for m in MODALITIES:
        nifti.write(out_dir / f"{case.case_id}_{m}.nii.gz",
                    case.volumes[m].voxels.astype(np.float32), case.spacing)
    if case.labels is not None:
        nifti.write(out_dir / f"{case.case_id}_seg.nii.gz",
                    restore_raw_labels(case.labels), case.spacing)
    return out_dir


def read_manifest(path):
    base = Path(path).parent
    dirs = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        dirs.append(p if p.is_absolute() else base / p)
    return dirs


def write_manifest(path, case_dirs):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{d}\n" for d in case_dirs))
    return path


def normalize_case(case):
    """Zero-mean unit-variance intensities inside each modality's brain mask.

    Population standard deviation; epsilon 1e-8 guards constant volumes.
    Voxels outside the mask are set to 0.
    """
    volumes = {}
    for m, vol in case.volumes.items():
        mask = vol.brain_mask
        if not mask.any():
            raise EmptyBrainMask(f"{case.case_id}/{m}: brain mask is empty")
        inside = vol.voxels[mask]
        mu = float(inside.mean())
        sigma = float(inside.std())
        out = np.zeros_like(vol.voxels, dtype=np.float32)
        out[mask] = (inside - mu) / (sigma + 1e-8)
        volumes[m] = ModalVolume(m, out, mask.copy())
    labels = None if case.labels is None else case.labels.copy()
    return MultiModalCase(case.case_id, volumes, labels, case.spacing)


def augment_case(case, policy, rng):
    """Random crop -> per-axis flips -> global scale -> per-modality shift.

    Geometric steps apply identically to all modalities, masks, and labels
    (index operations only, labels are never interpolated); photometric steps
    touch intensities only. Draw order is fixed so runs are reproducible from
    the generator state.
    """
    shape = case.shape
    crop = policy.crop_size
    if any(c > s for c, s in zip(crop, shape)):
        raise CropTooLarge(f"crop {crop} exceeds volume {shape}")

    starts = [int(rng.integers(0, s - c + 1)) for s, c in zip(shape, crop)]
    flips = [bool(rng.random() < policy.flip_prob) for _ in range(3)]
    scale = float(rng.uniform(*policy.scale_range))
    shifts = {m: float(rng.uniform(*policy.intensity_shift_range)) for m in MODALITIES}

    sl = tuple(slice(s, s + c) for s, c in zip(starts, crop))
    flip_axes = tuple(ax for ax, f in enumerate(flips) if f)

    def geometric(arr):
        out = arr[sl]
        if flip_axes:
            out = np.flip(out, axis=flip_axes)
        return np.ascontiguousarray(out)

    volumes = {}
    for m in MODALITIES:
        vol = case.volumes[m]
        vox = geometric(vol.voxels) * scale + shifts[m]
        volumes[m] = ModalVolume(m, vox.astype(np.float32), geometric(vol.brain_mask))
    labels = None if case.labels is None else geometric(case.labels)
    return MultiModalCase(case.case_id, volumes, labels, case.spacing)


def identity_policy(shape, seed=0):
    """An AugmentPolicy that leaves a case of the given shape unchanged."""
    from .config import AugmentPolicy
    return AugmentPolicy(crop_size=tuple(shape), flip_prob=0.0,
                         intensity_shift_range=(0.0, 0.0), scale_range=(1.0, 1.0), seed=seed)


def copy_case(case):
    volumes = {m: ModalVolume(m, v.voxels.copy(), v.brain_mask.copy())
               for m, v in case.volumes.items()}
    labels = None if case.labels is None else case.labels.copy()
    return MultiModalCase(case.case_id, volumes, labels, case.spacing)

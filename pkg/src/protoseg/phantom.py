"""Synthetic nested-region phantom generation.

Each phantom is a brain sphere containing three concentric tumor regions:
the enhancing core (class 3) innermost, the necrotic/non-enhancing shell
(class 1) around it, and edema (class 2) outermost, so the usual evaluation
nesting ET within TC within WT holds by construction.
"""

import numpy as np

from .config import MODALITIES, PhantomSpec
from .data import ModalVolume, MultiModalCase, save_case, write_manifest


def generate_phantom(spec, case_id="phantom"):
    """Deterministically build one case (raw, unnormalized intensities)."""
    rng = np.random.default_rng(spec.seed)
    h, w, d = spec.grid_size
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0, (d - 1) / 2.0])
    center = center + rng.uniform(-spec.center_jitter, spec.center_jitter, size=3)

    ii, jj, kk = np.meshgrid(np.arange(h), np.arange(w), np.arange(d), indexing="ij")
    dist = np.sqrt((ii - center[0]) ** 2 + (jj - center[1]) ** 2 + (kk - center[2]) ** 2)

    r_et, r_tc, r_wt = spec.radii
    labels = np.zeros(spec.grid_size, dtype=np.int64)
    labels[dist < r_wt] = 2       # edema shell [r_tc, r_wt)
    labels[dist < r_tc] = 1       # necrotic shell [r_et, r_tc)
    labels[dist < r_et] = 3       # enhancing core [0, r_et)
    brain = dist < (r_wt + spec.brain_margin)

    region_of = {0: "bg", 1: "ncr_net", 2: "ed", 3: "et"}
    volumes = {}
    for m in MODALITIES:
        profile = spec.intensity_profile[m]
        vox = np.zeros(spec.grid_size, dtype=np.float32)
        for cls, region in region_of.items():
            vox[labels == cls] = profile[region]
        if spec.noise_sigma > 0:
            vox = vox + rng.normal(0.0, spec.noise_sigma, size=spec.grid_size).astype(np.float32)
        vox[~brain] = 0.0
        volumes[m] = ModalVolume(m, vox.astype(np.float32), brain.copy())
    return MultiModalCase(case_id, volumes, labels)


def generate_dataset(out_dir, count, base_spec=None, seed=0, **spec_overrides):
    """Write ``count`` phantom cases in the dataset layout plus a manifest.

    Case i uses seed ``seed + i`` for both geometry jitter and noise, so the
    dataset is bit-reproducible from (seed, count, spec).
    """
    from dataclasses import replace
    from pathlib import Path

    out_dir = Path(out_dir)
    spec = base_spec or PhantomSpec(**spec_overrides)
    case_dirs = []
    for i in range(count):
        case_id = f"phantom_{i:03d}"
        case = generate_phantom(replace(spec, seed=seed + i), case_id)
        case_dirs.append(save_case(case, out_dir / case_id))
    manifest = write_manifest(out_dir / "manifest.txt", [d.name for d in case_dirs])
    return out_dir, manifest

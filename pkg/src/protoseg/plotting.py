"""Mid-slice overlay plots and activation-map heatmaps.

Overlay colors follow the usual convention: red for the necrotic core
(class 1), green for edema (class 2), yellow for enhancing tumor (class 3).
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .config import MODALITIES, REGIONS

PLANES = ("axial", "sagittal", "coronal")
_PLANE_AXIS = {"sagittal": 0, "coronal": 1, "axial": 2}
CLASS_COLORS = {1: (1.0, 0.0, 0.0), 2: (0.0, 0.8, 0.0), 3: (1.0, 1.0, 0.0)}


def _mid_slice(volume, plane):
    axis = _PLANE_AXIS[plane]
    idx = volume.shape[axis] // 2
    return np.take(volume, idx, axis=axis)


def _overlay(base, labels, alpha=0.45):
    lo, hi = float(base.min()), float(base.max())
    gray = (base - lo) / (hi - lo) if hi > lo else np.zeros_like(base)
    rgb = np.stack([gray] * 3, axis=-1)
    if labels is not None:
        for cls, color in CLASS_COLORS.items():
            m = labels == cls
            for c in range(3):
                rgb[..., c][m] = (1 - alpha) * rgb[..., c][m] + alpha * color[c]
    return rgb


def plot_case_slices(case, out_dir, pred_labels=None, modality="flair"):
    """Write one overlay image per plane; panels for ground truth and the
    prediction when both are available. Returns the written paths."""
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = case.volumes[modality].voxels
    panels = []
    if case.labels is not None:
        panels.append(("labels", case.labels))
    if pred_labels is not None:
        panels.append(("prediction", pred_labels))
    if not panels:
        panels = [("image", None)]
    paths = []
    for plane in PLANES:
        fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4))
        if len(panels) == 1:
            axes = [axes]
        for ax, (title, lab) in zip(axes, panels):
            lab_slice = None if lab is None else _mid_slice(lab, plane)
            ax.imshow(_overlay(_mid_slice(base, plane), lab_slice).transpose(1, 0, 2),
                      origin="lower")
            ax.set_title(f"{case.case_id} {plane} ({title})")
            ax.axis("off")
        path = out_dir / f"{case.case_id}_{plane}.png"
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_activation_maps(case_id, activations, out_dir):
    """One mid-axial heatmap per (modality, region) gate map.

    activations: dict (modality, region) -> tensor (1, C, h, w, d).
    """
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in MODALITIES:
        for r in REGIONS:
            grid = activations[(m, r)].detach().numpy()[0]
            heat = grid.mean(axis=0)  # channel-mean gate strength
            fig, ax = plt.subplots(figsize=(4, 4))
            im = ax.imshow(_mid_slice(heat, "axial").T, origin="lower", cmap="magma")
            fig.colorbar(im, ax=ax, shrink=0.8)
            ax.set_title(f"{case_id} {m}/{r} activation")
            ax.axis("off")
            path = out_dir / f"{case_id}_act_{m}_{r}.png"
            fig.tight_layout()
            fig.savefig(path, dpi=100)
            plt.close(fig)
            paths.append(path)
    return paths

"""Evaluation metrics: per-region Dice and 95th-percentile Hausdorff distance.

Regions follow the standard composition from internal classes: whole tumor
{1,2,3}, tumor core {1,3}, enhancing tumor {3}. HD95 is the pooled symmetric
convention: directed surface distances from both masks are pooled and the
95th percentile (linear interpolation) of the combined list is returned.
Surfaces are mask voxels with at least one 6-connected non-mask neighbor.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import LabelDomainError, ShapeError

REGION_CLASSES = {"wt": (1, 2, 3), "tc": (1, 3), "et": (3,)}
REGION_ORDER = ("tc", "et", "wt")


def compose_regions(labels):
    """Integer label grid -> dict of boolean masks for wt / tc / et."""
    labels = np.asarray(labels)
    bad = np.setdiff1d(np.unique(labels), [0, 1, 2, 3])
    if bad.size:
        raise LabelDomainError(f"labels contain values outside 0..3: {bad.tolist()}")
    return {name: np.isin(labels, classes) for name, classes in REGION_CLASSES.items()}


def dice_score(a, b):
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_voxels(mask):
    """Mask voxels with a 6-connected neighbor outside the mask (voxels at
    the array border count as surface)."""
    mask = np.asarray(mask, dtype=bool)
    interior = np.ones_like(mask)
    for axis in range(3):
        lo = np.roll(mask, 1, axis=axis)
        hi = np.roll(mask, -1, axis=axis)
        # rolled-in faces are outside the volume
        lo_idx = [slice(None)] * 3
        lo_idx[axis] = 0
        hi_idx = [slice(None)] * 3
        hi_idx[axis] = -1
        lo[tuple(lo_idx)] = False
        hi[tuple(hi_idx)] = False
        interior &= lo & hi
    return mask & ~interior


def grid_diagonal(shape, spacing=(1.0, 1.0, 1.0)):
    """Diagonal of the grid extent in mm ((dim-1) * spacing per axis)."""
    return float(np.sqrt(sum(((s - 1) * sp) ** 2 for s, sp in zip(shape, spacing))))


def hd95(a, b, spacing=(1.0, 1.0, 1.0), empty_penalty=None):
    """Symmetric 95th-percentile surface distance in mm.

    Both masks empty -> 0.0; exactly one empty -> the penalty (grid extent
    diagonal by default).
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a_empty, b_empty = not a.any(), not b.any()
    if a_empty and b_empty:
        return 0.0
    if a_empty or b_empty:
        if empty_penalty is None:
            empty_penalty = grid_diagonal(a.shape, spacing)
        return float(empty_penalty)
    surf_a = surface_voxels(a)
    surf_b = surface_voxels(b)
    # distance of every voxel to the nearest surface voxel of the other mask
    dist_to_b = distance_transform_edt(~surf_b, sampling=spacing)
    dist_to_a = distance_transform_edt(~surf_a, sampling=spacing)
    pooled = np.concatenate([dist_to_b[surf_a], dist_to_a[surf_b]])
    return float(np.percentile(pooled, 95))


@dataclass
class RegionReport:
    case_id: str
    dice: dict     # region -> float
    hd95: dict     # region -> float

    def rows(self):
        return [(self.case_id, r, self.dice[r], self.hd95[r]) for r in REGION_ORDER]


def evaluate_case(pred_labels, true_labels, spacing=(1.0, 1.0, 1.0),
                  empty_penalty=None, case_id=""):
    """Region-wise Dice and HD95 between predicted and true label grids."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise ShapeError(
            f"label shapes differ: {pred_labels.shape} vs {true_labels.shape}")
    pred_regions = compose_regions(pred_labels)
    true_regions = compose_regions(true_labels)
    dice = {r: dice_score(pred_regions[r], true_regions[r]) for r in REGION_ORDER}
    dist = {r: hd95(pred_regions[r], true_regions[r], spacing, empty_penalty)
            for r in REGION_ORDER}
    return RegionReport(case_id, dice, dist)


def write_report(reports, csv_path, json_path=None):
    """One row per case per region plus a mean summary row per region,
    as CSV and optionally JSON."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    rows = [row for rep in reports for row in rep.rows()]
    means = {r: (float(np.mean([rep.dice[r] for rep in reports])),
                 float(np.mean([rep.hd95[r] for rep in reports])))
             for r in REGION_ORDER} if reports else {}
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "region", "dice", "hd95"])
        for case_id, region, d, h in rows:
            writer.writerow([case_id, region, f"{d:.6f}", f"{h:.6f}"])
        for region in REGION_ORDER if reports else ():
            d, h = means[region]
            writer.writerow(["mean", region, f"{d:.6f}", f"{h:.6f}"])
    if json_path is not None:
        payload = {
            "cases": [{"case_id": rep.case_id, "dice": rep.dice, "hd95": rep.hd95}
                      for rep in reports],
            "mean": {r: {"dice": means[r][0], "hd95": means[r][1]} for r in means},
        }
        Path(json_path).write_text(json.dumps(payload, indent=2))
    return csv_path

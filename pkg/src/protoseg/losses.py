"""Loss stack: squared-denominator Dice, weighted cross-entropy, and the
composite objectives over prototype maps, shared-decoder branches, expert
maps, and deep-supervision fields.

Default variants keep losses bounded and crop-size independent (Dice term
averaged over the four classes, cross-entropy averaged per voxel); the
literal printed forms sit behind LossConfig flags. Probability upsampling is
trilinear followed by per-voxel renormalization; label downsampling is
nearest-neighbor.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import NUM_CLASSES, LossConfig
from .errors import ArityError, NormalizationError, ShapeError


def one_hot_field(labels):
    """(B, H, W, D) integer labels -> (B, 4, H, W, D) one-hot float field."""
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise ShapeError(f"labels outside [0, {NUM_CLASSES}): "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    return F.one_hot(labels.long(), NUM_CLASSES).permute(0, 4, 1, 2, 3).to(torch.get_default_dtype())


def upsample_probs(probs, size):
    """Trilinear upsampling of a probability field, renormalized per voxel."""
    if tuple(probs.shape[2:]) == tuple(size):
        return probs
    up = F.interpolate(probs, size=size, mode="trilinear", align_corners=False)
    up = up.clamp_min(0)
    return up / up.sum(dim=1, keepdim=True).clamp_min(1e-12)


def downsample_labels(labels, size):
    """Nearest-neighbor label downsampling; labels are never interpolated."""
    if tuple(labels.shape[1:]) == tuple(size):
        return labels
    out = F.interpolate(labels.float().unsqueeze(1), size=size, mode="nearest")
    return out.squeeze(1).long()


def _check_pair(pred, truth):
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    if pred.ndim != 5 or pred.shape[1] != NUM_CLASSES:
        raise ShapeError(f"expected (B, {NUM_CLASSES}, H, W, D), got {tuple(pred.shape)}")


def dice_loss(pred, truth, w=None):
    """Overlap loss over the four classes.

    Per class: 2 * sum(p*q) / (sum(p^2) + sum(q^2) + eps) with squared
    denominators (flag switches to plain sums). Returns 1 - mean over classes
    (default) or the literal 1 - sum with dice_normalize_by_classes=False.
    """
    w = w or LossConfig()
    _check_pair(pred, truth)
    with torch.no_grad():
        worst = (pred.sum(dim=1) - 1.0).abs().max()
        if worst > 1e-4:
            raise NormalizationError(
                f"prediction columns sum to 1 +/- {float(worst):.3g} (> 1e-4)")
    p = pred.flatten(2)
    q = truth.flatten(2)
    overlap = (p * q).sum(dim=2)
    if w.dice_squared_denominator:
        denom = (p * p).sum(dim=2) + (q * q).sum(dim=2)
    else:
        denom = p.sum(dim=2) + q.sum(dim=2)
    terms = 2.0 * overlap / (denom + w.epsilon)       # (B, 4)
    if w.dice_normalize_by_classes:
        per_item = 1.0 - terms.mean(dim=1)
    else:
        per_item = 1.0 - terms.sum(dim=1)
    return per_item.mean()


def _class_weights(truth, w):
    if not w.wce_inverse_frequency:
        return truth.new_tensor(w.class_weights)
    counts = truth.sum(dim=(0, 2, 3, 4))
    total = truth.shape[0] * truth.shape[2:].numel()
    return (total / (NUM_CLASSES * counts.clamp_min(1e-12))).clamp(0.1, 10.0)


def weighted_ce(pred, truth, w=None):
    """Weighted cross-entropy, mean per voxel by default (wce_mean=False
    restores the literal raw sum)."""
    w = w or LossConfig()
    _check_pair(pred, truth)
    weights = _class_weights(truth, w)[None, :, None, None, None]
    ce = -(weights * truth * torch.log(pred + w.log_floor)).sum(dim=1)
    per_item = ce.flatten(1).mean(dim=1) if w.wce_mean else ce.flatten(1).sum(dim=1)
    return per_item.mean()


def combined_loss(pred, truth, w=None):
    return weighted_ce(pred, truth, w) + dice_loss(pred, truth, w)


def branch_sum_loss(preds, labels, w=None):
    """Sum of combined losses of full-resolution branch predictions."""
    truth = one_hot_field(labels)
    total = None
    for pred in preds:
        term = combined_loss(pred, truth, w)
        total = term if total is None else total + term
    return total


def ctp_loss(prototype_maps, labels, w=None):
    """Sum over the four modalities of the combined loss on upsampled
    bottleneck-resolution region maps."""
    maps = list(prototype_maps.values()) if isinstance(prototype_maps, dict) else list(prototype_maps)
    if len(maps) != 4:
        raise ArityError(f"expected 4 modality maps, got {len(maps)}")
    size = tuple(labels.shape[1:])
    return branch_sum_loss([upsample_probs(m, size) for m in maps], labels, w)


def share_loss(share_preds, labels, w=None):
    """Sum over the five shared-decoder branches (four modalities plus the
    concatenated-input branch) of the combined loss at full resolution."""
    preds = list(share_preds.values()) if isinstance(share_preds, dict) else list(share_preds)
    if len(preds) != 5:
        raise ArityError(f"expected 5 shared-decoder branches, got {len(preds)}")
    return branch_sum_loss(preds, labels, w)


def expert_loss(expert_maps, labels, w=None):
    """Sum over expert levels 1..4: cross-entropy on the upsampled map vs
    full-resolution truth, Dice on the native-resolution map vs
    nearest-neighbor-downsampled truth (the printed asymmetry)."""
    maps = list(expert_maps)
    if len(maps) != 4:
        raise ArityError(f"expected expert maps for levels 1..4, got {len(maps)}")
    w = w or LossConfig()
    size = tuple(labels.shape[1:])
    truth_full = one_hot_field(labels)
    total = None
    for m in maps:
        wce = weighted_ce(upsample_probs(m, size), truth_full, w)
        truth_native = one_hot_field(downsample_labels(labels, m.shape[2:]))
        term = wce + dice_loss(m, truth_native, w)
        total = term if total is None else total + term
    return total


def deep_supervision_loss(block_preds, labels, w=None):
    """Sum over the five decoder blocks of the combined loss on upsampled
    block predictions."""
    preds = list(block_preds)
    if len(preds) != 5:
        raise ArityError(f"expected 5 decoder block predictions, got {len(preds)}")
    size = tuple(labels.shape[1:])
    return branch_sum_loss([upsample_probs(p, size) for p in preds], labels, w)


def total_loss(ctp, share, expert, deep):
    """Sum of the four components; every component must be present."""
    parts = {"ctp": ctp, "share": share, "expert": expert, "deep": deep}
    missing = [k for k, v in parts.items() if v is None]
    if missing:
        raise ArityError(f"missing loss components: {missing}")
    return ctp + share + expert + deep


@dataclass
class LossBreakdown:
    """Scalar component values for one training step's log record."""
    ctp: float = 0.0
    share: float = 0.0
    expert: float = 0.0
    deep: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return {"L_ctp": self.ctp, "L_share": self.share,
                "L_exp": self.expert, "L_deep": self.deep, "L_total": self.total}

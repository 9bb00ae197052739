"""Per-level expert heads on the extra encoder.

Levels 1..4 each own an expert: a 1x1x1 classification conv producing
4-class probability maps at the level's native resolution, and an
integration path that masks the level's features with the three tumor-region
probabilities, concatenates the masked copies, and convolves back to the
level width. Level 5 never builds an expert or a skip — the fusion branch
supplies the deepest decoder block directly.
"""

import torch
import torch.nn as nn

from .backbone import level_width
from .config import NUM_CLASSES, NUM_LEVELS
from .errors import LevelError, ShapeError

EXPERT_LEVELS = (1, 2, 3, 4)


class ExpertHead(nn.Module):
    """One level's classification and integration head."""

    def __init__(self, level, base_channels):
        super().__init__()
        if level not in EXPERT_LEVELS:
            raise LevelError(f"expert heads exist for levels 1..4, not {level}")
        self.level = level
        width = level_width(base_channels, level)
        self.classify = nn.Conv3d(width, NUM_CLASSES, 1)
        self.integrate_conv = nn.Sequential(
            nn.Conv3d(3 * width, width, 3, padding=1),
            nn.Conv3d(width, width, 1),
        )

    def region_maps(self, feat):
        """4-class softmax probability maps at the feature's resolution."""
        return torch.softmax(self.classify(feat), dim=1)

    def integrate(self, feat, maps):
        """Mask the features with each tumor-region probability and merge."""
        if maps.shape[1] != NUM_CLASSES or maps.shape[2:] != feat.shape[2:]:
            raise ShapeError(
                f"region maps {tuple(maps.shape)} do not match features {tuple(feat.shape)}")
        masked = torch.cat([feat * maps[:, k:k + 1] for k in (1, 2, 3)], dim=1)
        return self.integrate_conv(masked)

    def forward(self, feat):
        maps = self.region_maps(feat)
        return maps, self.integrate(feat, maps)


class ExpertStack(nn.Module):
    """Experts for levels 1..4, each with distinct parameters."""

    def __init__(self, base_channels):
        super().__init__()
        self.heads = nn.ModuleList([ExpertHead(l, base_channels) for l in EXPERT_LEVELS])

    def head(self, level):
        if level not in EXPERT_LEVELS:
            raise LevelError(f"no expert at level {level}")
        return self.heads[level - 1]

    def forward(self, encoder_feats):
        """encoder_feats: the extra encoder's five level outputs.

        Returns (region_maps, integrated) lists for levels 1..4.
        """
        maps, integrated = [], []
        for level in EXPERT_LEVELS:
            m, f = self.heads[level - 1](encoder_feats[level - 1])
            maps.append(m)
            integrated.append(f)
        return maps, integrated


def build_skip(level, modality_feats, expert_feat):
    """Channel-concatenate the four modality features and the expert feature
    for one level's skip connection into the segmentation decoder."""
    if level not in EXPERT_LEVELS:
        raise LevelError(f"skips are built for levels 1..4, not {level}")
    if len(modality_feats) != 4:
        raise ShapeError(f"expected 4 modality features, got {len(modality_feats)}")
    spatial = {tuple(f.shape[2:]) for f in list(modality_feats) + [expert_feat]}
    if len(spatial) != 1:
        raise ShapeError(f"level-{level} feature spatial dims differ: {spatial}")
    return torch.cat(list(modality_feats) + [expert_feat], dim=1)

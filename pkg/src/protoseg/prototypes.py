"""Tumor-region prototype construction at the bottleneck.

Per modality: bottleneck features are flattened to tokens, projected to the
token width, self-attended, and exchanged with every other modality through
pairwise cross-attention (12 directed pairs, each with its own parameters).
The interacted tokens pass through a feed-forward network, reshape to a
feature grid, and a 1x1x1 conv + softmax yields 4-class region probability
maps. A prototype vector per tumor region is the probability-weighted mean
of the features over the grid.
"""

import torch
import torch.nn as nn

from .attention import (CrossModalAttention, TokenSelfAttention, flatten_grid,
                        unflatten_tokens)
from .config import MODALITIES, NUM_CLASSES, REGIONS
from .errors import ArityError, ShapeError


def aggregate_interaction(current_tokens, cross_outputs):
    """Sum the three cross-modal transfers and add the current tokens back."""
    if len(cross_outputs) != 3:
        raise ArityError(f"expected 3 cross-attention outputs, got {len(cross_outputs)}")
    for out in cross_outputs:
        if out.shape != current_tokens.shape:
            raise ShapeError("cross-attention output shape differs from current tokens")
    return current_tokens + cross_outputs[0] + cross_outputs[1] + cross_outputs[2]


def compute_prototype(features, prob_map, masked_norm=False):
    """Region prototype: channel-wise sum of features weighted by the region
    probability, divided by the total voxel count.

    features: (B, C, h, w, d); prob_map: (B, h, w, d) or (B, 1, h, w, d).
    masked_norm divides by the probability mass instead of the voxel count
    (ablation variant, off by default).
    """
    if prob_map.ndim == features.ndim - 1:
        prob_map = prob_map.unsqueeze(1)
    if prob_map.shape[2:] != features.shape[2:] or prob_map.shape[1] != 1:
        raise ShapeError(
            f"probability map {tuple(prob_map.shape)} does not match features "
            f"{tuple(features.shape)}")
    weighted = (features * prob_map).sum(dim=(2, 3, 4))
    if masked_norm:
        return weighted / prob_map.sum(dim=(2, 3, 4)).clamp_min(1e-8)
    return weighted / float(features.shape[2:].numel())


class RegionMapHead(nn.Module):
    """FFN over tokens, reshape to a grid, then conv-softmax region maps."""

    def __init__(self, width, ffn_ratio=4, dropout=0.1):
        super().__init__()
        hidden = width * ffn_ratio
        self.ffn = nn.Sequential(
            nn.Linear(width, hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, width),
        )
        self.classify = nn.Conv3d(width, NUM_CLASSES, 1)

    def forward(self, tokens, grid_shape):
        features = unflatten_tokens(self.ffn(tokens), grid_shape)
        probs = torch.softmax(self.classify(features), dim=1)
        return features, probs


class PrototypeConstructor(nn.Module):
    """The full prototype branch over the four modality bottlenecks."""

    def __init__(self, in_width, token_width, heads, ffn_ratio=4, dropout=0.1,
                 masked_norm=False):
        super().__init__()
        self.token_width = token_width
        self.masked_norm = masked_norm
        self.project = nn.ModuleDict(
            {m: nn.Linear(in_width, token_width) for m in MODALITIES})
        self.self_attn = nn.ModuleDict(
            {m: TokenSelfAttention(token_width, heads) for m in MODALITIES})
        self.cross_attn = nn.ModuleDict({
            f"{cur}_from_{oth}": CrossModalAttention(token_width, heads)
            for cur in MODALITIES for oth in MODALITIES if cur != oth})
        self.region_head = nn.ModuleDict(
            {m: RegionMapHead(token_width, ffn_ratio, dropout) for m in MODALITIES})

    def tokenize(self, modality, bottleneck):
        """Flatten one modality's bottleneck grid and project to token width."""
        return self.project[modality](flatten_grid(bottleneck))

    def self_attend(self, modality, tokens):
        return self.self_attn[modality](tokens)

    def cross_attend(self, current, other, current_sa, other_sa):
        return self.cross_attn[f"{current}_from_{other}"](current_sa, other_sa)

    def forward(self, bottlenecks):
        """bottlenecks: dict modality -> (B, C, h, w, d) level-5 features.

        Returns (features, region_maps, prototypes): per-modality feature
        grids (B, C', h, w, d), 4-class probability grids (B, 4, h, w, d),
        and prototypes[modality][region] vectors (B, C').
        """
        if set(bottlenecks) != set(MODALITIES):
            raise ArityError(f"need all four modality bottlenecks, got {sorted(bottlenecks)}")
        grid_shape = next(iter(bottlenecks.values())).shape[2:]
        tokens = {m: self.tokenize(m, bottlenecks[m]) for m in MODALITIES}
        attended = {m: self.self_attend(m, tokens[m]) for m in MODALITIES}

        features, region_maps, prototypes = {}, {}, {}
        for cur in MODALITIES:
            crossed = [self.cross_attend(cur, oth, attended[cur], attended[oth])
                       for oth in MODALITIES if oth != cur]
            interacted = aggregate_interaction(tokens[cur], crossed)
            feats, probs = self.region_head[cur](interacted, grid_shape)
            features[cur] = feats
            region_maps[cur] = probs
            prototypes[cur] = {
                region: compute_prototype(feats, probs[:, idx + 1], self.masked_norm)
                for idx, region in enumerate(REGIONS)}
        return features, region_maps, prototypes

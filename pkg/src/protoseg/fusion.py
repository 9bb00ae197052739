"""Prototype-driven feature highlighting and cross-modality fusion.

Each (modality, region) pair owns a gate: the prototype vector is linearly
mapped, broadcast over the grid, concatenated with the features, and a
1x1x1 conv + ReLU produces a nonnegative activation map that multiplies the
features. The three highlighted maps per modality are assembled by a 3x3x3
conv plus a 1x1x1 integration conv; the four modality results are
concatenated on channels, self-attended over tokens, and projected to the
width the segmentation decoder's deepest block expects.
"""

import torch
import torch.nn as nn

from .attention import MultiHeadAttention, flatten_grid, unflatten_tokens
from .config import MODALITIES, REGIONS
from .errors import ShapeError


class PrototypeGate(nn.Module):
    """Activation map from one prototype (Prototype Drive Module)."""

    def __init__(self, width, per_channel=True):
        super().__init__()
        self.width = width
        self.map_proto = nn.Linear(width, width)
        self.gate = nn.Sequential(nn.Conv3d(2 * width, width if per_channel else 1, 1),
                                  nn.ReLU())

    def forward(self, features, proto):
        """features (B, C, h, w, d), proto (B, C) -> (activation, highlighted)."""
        if proto.shape[-1] != self.width:
            raise ShapeError(f"prototype width {proto.shape[-1]} != gate width {self.width}")
        grid = self.map_proto(proto)[:, :, None, None, None].expand_as(features)
        activation = self.gate(torch.cat([grid, features], dim=1))
        return activation, features * activation


class ModalAssembler(nn.Module):
    """Concatenate the three highlighted region maps and integrate."""

    def __init__(self, width, out_width):
        super().__init__()
        self.merge = nn.Conv3d(3 * width, width, 3, padding=1)
        self.integrate = nn.Conv3d(width, out_width, 1)

    def forward(self, highlighted):
        if len(highlighted) != 3:
            raise ShapeError(f"expected 3 highlighted maps, got {len(highlighted)}")
        shapes = {tuple(h.shape) for h in highlighted}
        if len(shapes) != 1:
            raise ShapeError(f"highlighted map shapes differ: {shapes}")
        return self.integrate(self.merge(torch.cat(highlighted, dim=1)))


class ModalityFuser(nn.Module):
    """Channel-concatenate the four modality features, self-attend over
    tokens (optional residual), and project to the fusion width."""

    def __init__(self, branch_width, heads, fusion_width, residual=True):
        super().__init__()
        self.residual = residual
        self.attn = MultiHeadAttention(4 * branch_width, heads)
        self.project = nn.Conv3d(4 * branch_width, fusion_width, 1)

    def forward(self, modality_feats):
        if len(modality_feats) != 4:
            raise ShapeError(f"expected 4 modality features, got {len(modality_feats)}")
        shapes = {tuple(f.shape) for f in modality_feats}
        if len(shapes) != 1:
            raise ShapeError(f"modality feature shapes differ: {shapes}")
        grid = torch.cat(modality_feats, dim=1)
        tokens = flatten_grid(grid)
        out = self.attn(tokens, tokens)
        if self.residual:
            out = tokens + out
        return self.project(unflatten_tokens(out, grid.shape[2:]))


class PrototypeFusion(nn.Module):
    """All gates, assemblers, and the fuser for the four modalities."""

    def __init__(self, token_width, branch_width, heads, fusion_width,
                 per_channel_gates=True, residual=True):
        super().__init__()
        self.gates = nn.ModuleDict({
            f"{m}_{r}": PrototypeGate(token_width, per_channel_gates)
            for m in MODALITIES for r in REGIONS})
        self.assemble = nn.ModuleDict(
            {m: ModalAssembler(token_width, branch_width) for m in MODALITIES})
        self.fuse = ModalityFuser(branch_width, heads, fusion_width, residual)

    def forward(self, features, prototypes):
        """features: dict modality -> (B, C', h, w, d); prototypes:
        dict modality -> dict region -> (B, C').

        Returns (fused, branch_feats, activations): the fused grid for the
        segmentation decoder, per-modality assembled features for the shared
        decoder, and activations[(modality, region)] gate maps.
        """
        activations, branch_feats = {}, {}
        for m in MODALITIES:
            highlighted = []
            for r in REGIONS:
                act, high = self.gates[f"{m}_{r}"](features[m], prototypes[m][r])
                activations[(m, r)] = act
                highlighted.append(high)
            branch_feats[m] = self.assemble[m](highlighted)
        fused = self.fuse([branch_feats[m] for m in MODALITIES])
        return fused, branch_feats, activations

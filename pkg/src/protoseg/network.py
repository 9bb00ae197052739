"""Full segmentation network: encoders, prototype branch, fusion, experts,
and the two decoders.

Data flow per forward pass: four unshared modality encoders plus one extra
encoder over the concatenated input; the prototype branch interacts the four
bottlenecks and yields per-modality features, region maps, and prototypes;
the fusion branch highlights and fuses them into the segmentation decoder's
deepest-block input; expert heads refine the extra encoder's levels 1..4,
which join the modality features in the skip connections. The shared decoder
(same structure as the segmentation decoder, its own parameters) decodes
each modality's fused branch and the extra encoder's branch for auxiliary
supervision.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .backbone import Decoder, Encoder, level_width
from .config import MODALITIES, NUM_LEVELS, ModelConfig
from .errors import ShapeError
from .experts import ExpertStack, build_skip
from .fusion import PrototypeFusion
from .prototypes import PrototypeConstructor


@dataclass
class NetworkOutputs:
    seg_probs: torch.Tensor                    # (B, 4, H, W, D)
    deep_supervision: list | None = None       # 5 fields, deepest block first
    prototype_maps: dict | None = None         # modality -> (B, 4, h, w, d)
    prototypes: dict | None = None             # modality -> region -> (B, C')
    share_probs: dict | None = None            # branch -> (B, 4, H, W, D)
    expert_maps: list | None = None            # levels 1..4, native resolution
    activations: dict | None = None            # (modality, region) -> gate grid
    branch_feats: dict | None = None           # modality -> assembled grid


def _check_ladder(feats, input_shape):
    for level, feat in enumerate(feats, start=1):
        expected = tuple(s // 2 ** (level - 1) for s in input_shape)
        if tuple(feat.shape[2:]) != expected:
            raise ShapeError(
                f"level {level} features {tuple(feat.shape[2:])}, expected {expected}")


class SegmentationNetwork(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        base = cfg.base_channels
        bottleneck = cfg.bottleneck_width

        self.encoders = nn.ModuleDict(
            {m: Encoder(1, base, cfg.leaky_slope) for m in MODALITIES})

        self.prototype_branch = None
        if cfg.enable_ctp:
            self.prototype_branch = PrototypeConstructor(
                bottleneck, cfg.token_width, cfg.heads, cfg.ffn_ratio,
                cfg.ffn_dropout, cfg.prototype_masked_norm)

        self.fusion_branch = None
        self.bottleneck_merge = None
        if cfg.enable_pfrf:
            self.fusion_branch = PrototypeFusion(
                cfg.token_width, bottleneck, cfg.heads, cfg.fusion_width,
                cfg.per_channel_gates, cfg.fusion_residual)
        else:
            self.bottleneck_merge = nn.Conv3d(4 * bottleneck, cfg.fusion_width, 1)

        self.extra_encoder = None
        self.experts = None
        if cfg.enable_kiimi:
            self.extra_encoder = Encoder(4, base, cfg.leaky_slope)
            self.experts = ExpertStack(base)

        per_level = [level_width(base, l) for l in range(1, NUM_LEVELS)]
        n_skip = 5 if cfg.enable_kiimi else 4
        self.seg_decoder = Decoder(base, cfg.fusion_width,
                                   [n_skip * w for w in per_level],
                                   supervision=True, slope=cfg.leaky_slope)
        self.share_decoder = None
        if cfg.enable_pfrf or cfg.enable_kiimi:
            self.share_decoder = Decoder(base, bottleneck, per_level,
                                         supervision=False, slope=cfg.leaky_slope)

    def forward(self, x, internals=False):
        """x: (B, 4, H, W, D) stacked modalities in canonical order."""
        if x.ndim != 5 or x.shape[1] != 4:
            raise ShapeError(f"expected (B, 4, H, W, D) input, got {tuple(x.shape)}")
        cfg = self.config
        input_shape = tuple(x.shape[2:])

        mod_feats = {m: self.encoders[m](x[:, i:i + 1])
                     for i, m in enumerate(MODALITIES)}
        for m in MODALITIES:
            _check_ladder(mod_feats[m], input_shape)

        expert_maps = expert_feats = extra_feats = None
        if cfg.enable_kiimi:
            extra_feats = self.extra_encoder(x)
            _check_ladder(extra_feats, input_shape)
            expert_maps, expert_feats = self.experts(extra_feats)

        features = region_maps = prototypes = None
        if cfg.enable_ctp:
            bottlenecks = {m: mod_feats[m][-1] for m in MODALITIES}
            features, region_maps, prototypes = self.prototype_branch(bottlenecks)

        branch_feats = activations = None
        if cfg.enable_pfrf:
            fused, branch_feats, activations = self.fusion_branch(features, prototypes)
        else:
            fused = self.bottleneck_merge(
                torch.cat([mod_feats[m][-1] for m in MODALITIES], dim=1))

        skips = []
        for level in range(1, NUM_LEVELS):
            level_feats = [mod_feats[m][level - 1] for m in MODALITIES]
            if cfg.enable_kiimi:
                skips.append(build_skip(level, level_feats, expert_feats[level - 1]))
            else:
                skips.append(torch.cat(level_feats, dim=1))

        seg_probs, aux = self.seg_decoder(fused, skips)

        share_probs = None
        if self.share_decoder is not None:
            share_probs = {}
            if cfg.enable_pfrf:
                for m in MODALITIES:
                    probs, _ = self.share_decoder(branch_feats[m],
                                                  mod_feats[m][:NUM_LEVELS - 1])
                    share_probs[m] = probs
            if cfg.enable_kiimi:
                probs, _ = self.share_decoder(extra_feats[-1], expert_feats)
                share_probs["combined"] = probs

        return NetworkOutputs(
            seg_probs=seg_probs,
            deep_supervision=aux,
            prototype_maps=region_maps,
            prototypes=prototypes,
            share_probs=share_probs,
            expert_maps=expert_maps,
            activations=activations if internals else None,
            branch_feats=branch_feats if internals else None,
        )

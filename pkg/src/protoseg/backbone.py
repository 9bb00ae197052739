"""U-Net skeleton: five-level encoders and decoders with skip connections.

Every block is two (3x3x3 conv, instance norm, LeakyReLU) units. Encoder
levels 2..5 downsample by carrying stride 2 on the block's first conv;
decoder blocks upsample trilinearly by 2 and then convolve, concatenating
the skip features on channels first. The two decoders in the network share
this structure but never parameters.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import NUM_CLASSES, NUM_LEVELS
from .errors import ShapeError


def level_width(base_channels, level):
    """Channel width at a 1-indexed encoder/decoder level."""
    return base_channels * 2 ** (level - 1)


class InstanceNorm(nn.Module):
    """Per-sample, per-channel normalization over the spatial grid.

    Same math as affine InstanceNorm3d with biased variance, but defined on
    one-voxel grids too (the built-in refuses them in training mode, and a
    16^3 input reaches a 1^3 bottleneck).
    """

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mu = x.mean(dim=(2, 3, 4), keepdim=True)
        var = x.var(dim=(2, 3, 4), keepdim=True, unbiased=False)
        normed = (x - mu) / torch.sqrt(var + self.eps)
        shape = (1, -1, 1, 1, 1)
        return normed * self.weight.view(shape) + self.bias.view(shape)


class ConvUnit(nn.Sequential):
    def __init__(self, in_ch, out_ch, stride=1, slope=0.01):
        super().__init__(
            nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1),
            InstanceNorm(out_ch),
            nn.LeakyReLU(slope),
        )


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch, out_ch, stride=1, slope=0.01):
        super().__init__(ConvUnit(in_ch, out_ch, stride, slope),
                         ConvUnit(out_ch, out_ch, 1, slope))


class Encoder(nn.Module):
    """Five feature-extraction blocks; level l output has width base*2^(l-1)
    at 1/2^(l-1) of the input resolution."""

    def __init__(self, in_channels, base_channels, slope=0.01):
        super().__init__()
        self.in_channels = in_channels
        blocks = [ConvBlock(in_channels, base_channels, 1, slope)]
        for level in range(2, NUM_LEVELS + 1):
            blocks.append(ConvBlock(level_width(base_channels, level - 1),
                                    level_width(base_channels, level), 2, slope))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected (B, {self.in_channels}, h, w, d), got {tuple(x.shape)}")
        if any(s % 16 != 0 for s in x.shape[2:]):
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} must be divisible by 16")
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Mirror of the encoder: the deepest block convolves at bottleneck
    resolution, then four up-blocks each double resolution and consume a
    skip. The final 1x1x1 head produces 4-class per-voxel probabilities;
    with supervision enabled, every block also emits a probability field at
    its native resolution.
    """

    def __init__(self, base_channels, in_width, skip_widths, supervision=False, slope=0.01):
        super().__init__()
        if len(skip_widths) != NUM_LEVELS - 1:
            raise ShapeError(f"need skip widths for levels 1..4, got {len(skip_widths)}")
        self.skip_widths = tuple(skip_widths)
        widths = [level_width(base_channels, l) for l in range(1, NUM_LEVELS + 1)]
        self.bottom = ConvBlock(in_width, widths[4], 1, slope)
        self.up_blocks = nn.ModuleList([
            ConvBlock(widths[l + 1] + skip_widths[l], widths[l], 1, slope)
            for l in reversed(range(NUM_LEVELS - 1))  # levels 4, 3, 2, 1
        ])
        self.final_head = nn.Conv3d(widths[0], NUM_CLASSES, 1)
        self.supervision = supervision
        if supervision:
            # heads for the deeper block outputs: levels 5, 4, 3, 2; the
            # full-resolution block's field is the final head's output itself
            self.aux_heads = nn.ModuleList(
                [nn.Conv3d(w, NUM_CLASSES, 1) for w in reversed(widths[1:])])

    def forward(self, bottleneck, skips):
        if len(skips) != NUM_LEVELS - 1:
            raise ShapeError(f"expected 4 skip tensors, got {len(skips)}")
        for skip, width in zip(skips, self.skip_widths):
            if skip.shape[1] != width:
                raise ShapeError(f"skip width {skip.shape[1]} != declared {width}")
        x = self.bottom(bottleneck)
        block_outs = [x]
        for i, block in enumerate(self.up_blocks):
            skip = skips[NUM_LEVELS - 2 - i]  # level 4 first, down to 1
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            if x.shape[2:] != skip.shape[2:]:
                raise ShapeError(
                    f"skip spatial dims {tuple(skip.shape[2:])} do not match "
                    f"decoder ladder {tuple(x.shape[2:])}")
            x = block(torch.cat([x, skip], dim=1))
            block_outs.append(x)
        probs = torch.softmax(self.final_head(x), dim=1)
        aux = None
        if self.supervision:
            aux = [torch.softmax(head(out), dim=1)
                   for head, out in zip(self.aux_heads, block_outs[:-1])]
            aux.append(probs)
        return probs, aux


def count_parameters(module):
    """Total scalar parameter count of a module."""
    return sum(p.numel() for p in module.parameters())

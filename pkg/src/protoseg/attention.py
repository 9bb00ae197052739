"""Token utilities and multi-head attention blocks.

Tokens are (B, N, C) with N = h*w*d flattened h-major (h slowest, then w,
then d), so flatten/unflatten is a pure reshape and round-trips exactly.
All attention projections are bias-free matrices; there is no positional
encoding anywhere, which keeps the cores permutation-equivariant.
"""

import math

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError


def flatten_grid(x):
    """(B, C, h, w, d) -> tokens (B, h*w*d, C)."""
    b, c = x.shape[:2]
    return x.reshape(b, c, -1).transpose(1, 2)


def unflatten_tokens(tokens, grid_shape):
    """Tokens (B, N, C) -> (B, C, h, w, d); N must equal h*w*d."""
    b, n, c = tokens.shape
    h, w, d = grid_shape
    if n != h * w * d:
        raise ShapeError(f"{n} tokens cannot fill grid {grid_shape}")
    return tokens.transpose(1, 2).reshape(b, c, h, w, d)


class MultiHeadAttention(nn.Module):
    """softmax(Q K^T / sqrt(d)) V per head, heads concatenated and projected.

    Queries come from the first argument, keys/values from the second; pass
    the same tensor twice for self-attention.
    """

    def __init__(self, width, heads):
        super().__init__()
        if width % heads != 0:
            raise ConfigError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = nn.Linear(width, width, bias=False)
        self.k_proj = nn.Linear(width, width, bias=False)
        self.v_proj = nn.Linear(width, width, bias=False)
        self.out_proj = nn.Linear(width, width, bias=False)

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(1, 2)

    def attention_map(self, query_tokens, context_tokens):
        """Per-head attention rows (B, heads, N_q, N_kv); each row is a
        softmax distribution over the context tokens."""
        q = self._split(self.q_proj(query_tokens))
        k = self._split(self.k_proj(context_tokens))
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)

    def forward(self, query_tokens, context_tokens):
        if query_tokens.shape[-1] != context_tokens.shape[-1]:
            raise ShapeError("query and context token widths differ")
        attn = self.attention_map(query_tokens, context_tokens)
        v = self._split(self.v_proj(context_tokens))
        out = (attn @ v).transpose(1, 2).flatten(2)
        return self.out_proj(out)


class TokenSelfAttention(nn.Module):
    """Pre-norm residual self-attention: x + MHA(LN(x))."""

    def __init__(self, width, heads):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads)

    def forward(self, tokens):
        normed = self.norm(tokens)
        return tokens + self.attn(normed, normed)


class CrossModalAttention(nn.Module):
    """Attention from one modality's tokens into another's.

    Both inputs are layer-normalized (queries and keys/values separately);
    there is no residual here — the interaction aggregation adds the current
    modality's tokens back afterwards.
    """

    def __init__(self, width, heads):
        super().__init__()
        self.norm_q = nn.LayerNorm(width)
        self.norm_kv = nn.LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads)

    def forward(self, current_tokens, other_tokens):
        if current_tokens.shape[-1] != other_tokens.shape[-1] \
                or current_tokens.shape[0] != other_tokens.shape[0]:
            raise ShapeError(
                f"token sequences differ: {tuple(current_tokens.shape)} vs "
                f"{tuple(other_tokens.shape)}")
        return self.attn(self.norm_q(current_tokens), self.norm_kv(other_tokens))

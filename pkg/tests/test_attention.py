import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from protoseg import oracles
from protoseg.attention import (CrossModalAttention, MultiHeadAttention,
                                TokenSelfAttention, flatten_grid,
                                unflatten_tokens)
from protoseg.errors import ConfigError, ShapeError


@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
       st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_flatten_roundtrip_exact(c, h, w, d, seed):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.standard_normal((1, c, h, w, d)))
    tokens = flatten_grid(x)
    assert tokens.shape == (1, h * w * d, c)
    assert torch.equal(unflatten_tokens(tokens, (h, w, d)), x)


def test_flatten_order_is_h_major():
    x = torch.arange(8.0).reshape(1, 1, 2, 2, 2)
    tokens = flatten_grid(x)[0, :, 0]
    # h slowest, then w, then d
    assert tokens.tolist() == [0, 1, 2, 3, 4, 5, 6, 7]


def test_unflatten_wrong_count():
    with pytest.raises(ShapeError):
        unflatten_tokens(torch.zeros(1, 5, 3), (2, 2, 2))


def test_attention_rows_normalized():
    torch.manual_seed(1)
    mha = MultiHeadAttention(8, 4)
    q = torch.randn(2, 6, 8)
    kv = torch.randn(2, 5, 8)
    rows = mha.attention_map(q, kv)
    assert rows.shape == (2, 4, 6, 5)
    assert (rows >= 0).all()
    assert (rows.sum(dim=-1) - 1).abs().max() < 1e-6


def test_single_token_softmax_is_one_and_output_is_residual_plus_value():
    torch.manual_seed(2)
    sa = TokenSelfAttention(6, 2).double()
    tok = torch.randn(1, 1, 6, dtype=torch.float64)
    rows = sa.attn.attention_map(sa.norm(tok), sa.norm(tok))
    assert torch.allclose(rows, torch.ones_like(rows))
    # output = residual + out-projected value of the normalized token
    normed = sa.norm(tok)
    value = sa.attn.out_proj(sa.attn.v_proj(normed))
    assert torch.allclose(sa(tok), tok + value, atol=1e-12)


def test_identical_tokens_give_identical_outputs():
    torch.manual_seed(3)
    sa = TokenSelfAttention(8, 2)
    tok = torch.randn(1, 1, 8).expand(1, 5, 8).contiguous()
    out = sa(tok)
    assert torch.allclose(out, out[:, :1].expand_as(out), atol=1e-6)


def test_self_attention_matches_loop_oracle():
    rng = np.random.default_rng(4)
    sa = TokenSelfAttention(6, 2).double()
    toks = torch.from_numpy(rng.standard_normal((1, 3, 6)))
    normed = oracles.layer_norm(toks.numpy()[0], sa.norm.weight.detach().numpy(),
                                sa.norm.bias.detach().numpy())
    ref = toks.numpy()[0] + oracles.multi_head_attention(
        normed, normed,
        sa.attn.q_proj.weight.detach().numpy().T,
        sa.attn.k_proj.weight.detach().numpy().T,
        sa.attn.v_proj.weight.detach().numpy().T,
        sa.attn.out_proj.weight.detach().numpy().T, heads=2)
    np.testing.assert_allclose(sa(toks).detach().numpy()[0], ref, atol=1e-10)


def test_cross_attention_uniform_when_query_contributes_nothing():
    # zero q projection -> uniform attention -> each output token is the
    # out-projected mean of the value projections
    torch.manual_seed(5)
    ca = CrossModalAttention(6, 2).double()
    with torch.no_grad():
        ca.attn.q_proj.weight.zero_()
    cur = torch.randn(1, 3, 6, dtype=torch.float64)
    oth = torch.randn(1, 4, 6, dtype=torch.float64)
    out = ca(cur, oth)
    v = ca.attn.v_proj(ca.norm_kv(oth))
    expect = ca.attn.out_proj(v.mean(dim=1, keepdim=True)).expand_as(out)
    assert torch.allclose(out, expect, atol=1e-10)


def test_cross_attention_singleton_key():
    torch.manual_seed(6)
    ca = CrossModalAttention(8, 2).double()
    cur = torch.randn(1, 5, 8, dtype=torch.float64)
    oth = torch.randn(1, 1, 8, dtype=torch.float64)
    out = ca(cur, oth)
    expect = ca.attn.out_proj(ca.attn.v_proj(ca.norm_kv(oth))).expand_as(out)
    assert torch.allclose(out, expect, atol=1e-10)


def test_cross_attention_matches_loop_oracle_2head_4token():
    rng = np.random.default_rng(7)
    ca = CrossModalAttention(8, 2).double()
    cur = torch.from_numpy(rng.standard_normal((1, 4, 8)))
    oth = torch.from_numpy(rng.standard_normal((1, 4, 8)))
    nq = oracles.layer_norm(cur.numpy()[0], ca.norm_q.weight.detach().numpy(),
                            ca.norm_q.bias.detach().numpy())
    nkv = oracles.layer_norm(oth.numpy()[0], ca.norm_kv.weight.detach().numpy(),
                             ca.norm_kv.bias.detach().numpy())
    ref = oracles.multi_head_attention(
        nq, nkv,
        ca.attn.q_proj.weight.detach().numpy().T,
        ca.attn.k_proj.weight.detach().numpy().T,
        ca.attn.v_proj.weight.detach().numpy().T,
        ca.attn.out_proj.weight.detach().numpy().T, heads=2)
    np.testing.assert_allclose(ca(cur, oth).detach().numpy()[0], ref, atol=1e-6)


def test_permutation_equivariance_no_positional_encoding():
    torch.manual_seed(8)
    sa = TokenSelfAttention(8, 4)
    toks = torch.randn(1, 6, 8)
    perm = torch.randperm(6)
    assert torch.allclose(sa(toks)[:, perm], sa(toks[:, perm]), atol=1e-6)


def test_width_not_divisible_by_heads():
    with pytest.raises(ConfigError):
        MultiHeadAttention(6, 4)


def test_token_width_mismatch():
    ca = CrossModalAttention(8, 2)
    with pytest.raises(ShapeError):
        ca(torch.zeros(1, 3, 8), torch.zeros(1, 4, 6))

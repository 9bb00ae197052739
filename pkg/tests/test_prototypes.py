import math

import numpy as np
import pytest
import torch

from protoseg import oracles
from protoseg.config import MODALITIES, REGIONS, ModelConfig
from protoseg.errors import ArityError, ConfigError, ShapeError
from protoseg.prototypes import (PrototypeConstructor, RegionMapHead,
                                 aggregate_interaction, compute_prototype)


# -- aggregation (interaction sum) ---------------------------------------------

def test_aggregate_zero_cross_outputs_is_identity():
    cur = torch.randn(1, 8, 4)
    zeros = [torch.zeros_like(cur)] * 3
    assert torch.equal(aggregate_interaction(cur, zeros), cur)


def test_aggregate_zero_current_is_plain_sum():
    a, b, c = (torch.randn(1, 8, 4) for _ in range(3))
    out = aggregate_interaction(torch.zeros(1, 8, 4), [a, b, c])
    assert torch.allclose(out, a + b + c)


def test_aggregate_matches_accumulation_loop():
    rng = np.random.default_rng(0)
    cur = torch.from_numpy(rng.standard_normal((1, 5, 3)))
    outs = [torch.from_numpy(rng.standard_normal((1, 5, 3))) for _ in range(3)]
    got = aggregate_interaction(cur, outs).numpy()
    expect = cur.numpy().copy()
    for o in outs:
        for i in range(5):
            for j in range(3):
                expect[0, i, j] += o.numpy()[0, i, j]
    np.testing.assert_allclose(got, expect)


def test_aggregate_linearity():
    rng = np.random.default_rng(1)
    cur = torch.from_numpy(rng.standard_normal((1, 4, 2)))
    outs = [torch.from_numpy(rng.standard_normal((1, 4, 2))) for _ in range(3)]
    # power-of-two scaling commutes with the sum bit-exactly
    scaled = aggregate_interaction(2.0 * cur, [2.0 * o for o in outs])
    assert torch.equal(scaled, 2.0 * aggregate_interaction(cur, outs))
    scaled = aggregate_interaction(3.5 * cur, [3.5 * o for o in outs])
    assert torch.allclose(scaled, 3.5 * aggregate_interaction(cur, outs),
                          atol=1e-12)


def test_aggregate_arity():
    cur = torch.zeros(1, 4, 2)
    with pytest.raises(ArityError):
        aggregate_interaction(cur, [cur, cur])


# -- region maps -----------------------------------------------------------------

def test_region_maps_zero_params_uniform():
    head = RegionMapHead(6, dropout=0.0)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    feats, probs = head(torch.randn(1, 8, 6), (2, 2, 2))
    assert torch.allclose(probs, torch.full_like(probs, 0.25))


def test_region_maps_bias_dominates():
    head = RegionMapHead(6, dropout=0.0)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
        head.classify.bias.copy_(torch.tensor([10.0, 0.0, 0.0, 0.0]))
    _, probs = head(torch.randn(1, 8, 6), (2, 2, 2))
    expect = math.exp(10) / (math.exp(10) + 3)
    assert torch.allclose(probs[:, 0], torch.full_like(probs[:, 0], expect),
                          atol=1e-6)
    assert (probs[:, 0] > 0.999).all()


def test_region_maps_sum_to_one():
    head = RegionMapHead(6, dropout=0.0)
    _, probs = head(torch.randn(1, 27, 6), (3, 3, 3))
    assert (probs.sum(dim=1) - 1).abs().max() < 1e-6
    assert probs.shape == (1, 4, 3, 3, 3)


# -- prototypes -------------------------------------------------------------------

def test_prototype_uniform_map_is_spatial_mean():
    feats = torch.randn(1, 5, 2, 3, 2)
    ones = torch.ones(1, 2, 3, 2)
    v = compute_prototype(feats, ones)
    assert torch.allclose(v, feats.mean(dim=(2, 3, 4)), atol=1e-6)


def test_prototype_one_hot_map():
    feats = torch.randn(1, 3, 2, 2, 2)
    pmap = torch.zeros(1, 2, 2, 2)
    pmap[0, 1, 0, 1] = 1.0
    v = compute_prototype(feats, pmap)
    assert torch.allclose(v, feats[:, :, 1, 0, 1] / 8.0)


def test_prototype_matches_triple_loop():
    rng = np.random.default_rng(2)
    feats = rng.standard_normal((2, 2, 2, 2))
    pmap = rng.random((2, 2, 2))
    got = compute_prototype(torch.from_numpy(feats[None]),
                            torch.from_numpy(pmap[None])).numpy()[0]
    np.testing.assert_allclose(got, oracles.region_prototype(feats, pmap),
                               atol=1e-12)


def test_prototype_bilinearity_exact():
    rng = np.random.default_rng(3)
    feats = torch.from_numpy(rng.standard_normal((1, 3, 2, 2, 2)))
    pmap = torch.from_numpy(rng.random((1, 2, 2, 2)))
    assert torch.equal(compute_prototype(feats, 2.0 * pmap),
                       2.0 * compute_prototype(feats, pmap))
    assert torch.equal(compute_prototype(0.5 * feats, pmap),
                       0.5 * compute_prototype(feats, pmap))


def test_prototype_masked_norm_variant():
    feats = torch.ones(1, 2, 2, 2, 2)
    pmap = torch.zeros(1, 2, 2, 2)
    pmap[0, 0, 0, 0] = 0.5
    literal = compute_prototype(feats, pmap)            # 0.5 / 8
    masked = compute_prototype(feats, pmap, masked_norm=True)  # 0.5 / 0.5
    assert torch.allclose(literal, torch.full((1, 2), 0.0625))
    assert torch.allclose(masked, torch.ones(1, 2))


def test_prototype_shape_validation():
    with pytest.raises(ShapeError):
        compute_prototype(torch.zeros(1, 2, 2, 2, 2), torch.zeros(1, 3, 2, 2))


# -- the assembled branch ----------------------------------------------------------

def test_constructor_produces_12_prototypes_and_4_maps():
    torch.manual_seed(0)
    ctor = PrototypeConstructor(in_width=8, token_width=8, heads=2, dropout=0.0)
    bottlenecks = {m: torch.randn(1, 8, 2, 2, 2) for m in MODALITIES}
    feats, maps, protos = ctor(bottlenecks)
    assert set(feats) == set(MODALITIES)
    for m in MODALITIES:
        assert feats[m].shape == (1, 8, 2, 2, 2)
        assert maps[m].shape == (1, 4, 2, 2, 2)
        assert (maps[m].sum(dim=1) - 1).abs().max() < 1e-5
        assert set(protos[m]) == set(REGIONS)
        for r in REGIONS:
            assert protos[m][r].shape == (1, 8)
    with pytest.raises(ArityError):
        ctor({m: bottlenecks[m] for m in MODALITIES[:3]})


def test_constructor_pairs_have_distinct_parameters():
    ctor = PrototypeConstructor(in_width=4, token_width=4, heads=2)
    assert len(ctor.cross_attn) == 12
    ids = {id(p) for mod in ctor.cross_attn.values() for p in mod.parameters()}
    counts = sum(1 for mod in ctor.cross_attn.values() for p in mod.parameters())
    assert len(ids) == counts  # no sharing between directed pairs


def test_token_width_must_divide_heads():
    with pytest.raises(ConfigError):
        ModelConfig(base_channels=2, heads=8, token_width=12)

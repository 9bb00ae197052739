import numpy as np
import pytest
import torch

from protoseg import oracles
from protoseg.errors import LevelError, ShapeError
from protoseg.experts import EXPERT_LEVELS, ExpertHead, ExpertStack, build_skip


def test_region_maps_zero_params_uniform():
    head = ExpertHead(1, 2)
    with torch.no_grad():
        head.classify.weight.zero_()
        head.classify.bias.zero_()
    maps = head.region_maps(torch.randn(1, 2, 4, 4, 4))
    assert torch.allclose(maps, torch.full_like(maps, 0.25))


def test_region_maps_normalized():
    head = ExpertHead(2, 2)
    maps = head.region_maps(torch.randn(1, 4, 4, 4, 4))
    assert maps.shape == (1, 4, 4, 4, 4)
    assert (maps.sum(dim=1) - 1).abs().max() < 1e-5


def test_region_maps_match_loop_conv_softmax():
    rng = np.random.default_rng(0)
    head = ExpertHead(1, 2).double()
    feat = rng.standard_normal((2, 3, 3, 3))
    ours = head.region_maps(torch.from_numpy(feat[None])).detach().numpy()[0]
    logits = oracles.conv3d(feat, head.classify.weight.detach().numpy(),
                            head.classify.bias.detach().numpy(), padding=0)
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    ref = e / e.sum(axis=0, keepdims=True)
    np.testing.assert_allclose(ours, ref, atol=1e-10)


def test_integrate_zero_maps_zero_bias_restrains_everything():
    head = ExpertHead(1, 2)
    with torch.no_grad():
        for conv in head.integrate_conv:
            conv.bias.zero_()
    feat = torch.randn(1, 2, 4, 4, 4)
    maps = torch.zeros(1, 4, 4, 4, 4)
    out = head.integrate(feat, maps)
    assert (out == 0).all()


def test_integrate_uniform_quarter_maps():
    torch.manual_seed(0)
    head = ExpertHead(1, 2)
    feat = torch.randn(1, 2, 4, 4, 4)
    maps = torch.full((1, 4, 4, 4, 4), 0.25)
    out = head.integrate(feat, maps)
    quarter = feat / 4.0
    expect = head.integrate_conv(torch.cat([quarter, quarter, quarter], dim=1))
    assert torch.allclose(out, expect, atol=1e-6)


def test_integrate_matches_loop_oracle():
    rng = np.random.default_rng(1)
    head = ExpertHead(1, 2).double()
    feat = rng.standard_normal((2, 3, 3, 3))
    logits = rng.standard_normal((4, 3, 3, 3))
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    maps = e / e.sum(axis=0, keepdims=True)
    ours = head.integrate(torch.from_numpy(feat[None]),
                          torch.from_numpy(maps[None])).detach().numpy()[0]
    merge, integ = head.integrate_conv[0], head.integrate_conv[1]
    ref = oracles.expert_integration(
        feat, maps, merge.weight.detach().numpy(), merge.bias.detach().numpy(),
        integ.weight.detach().numpy(), integ.bias.detach().numpy())
    np.testing.assert_allclose(ours, ref, atol=1e-10)


def test_restraint_pre_conv_concatenation_exact():
    # voxels with zero tumor probability contribute zero before the conv
    head = ExpertHead(1, 2)
    feat = torch.randn(1, 2, 4, 4, 4)
    maps = torch.zeros(1, 4, 4, 4, 4)
    maps[:, 0] = 1.0  # all mass on background
    masked = torch.cat([feat * maps[:, k:k + 1] for k in (1, 2, 3)], dim=1)
    assert (masked == 0).all()


def test_level_isolation():
    torch.manual_seed(1)
    stack = ExpertStack(base_channels=2)
    feats = [torch.randn(1, 2 * 2 ** l, 8 // 2 ** l, 8 // 2 ** l, 8 // 2 ** l)
             for l in range(5)]
    _, before = stack(feats)
    with torch.no_grad():
        for p in stack.head(2).parameters():
            p.add_(1.0)
    _, after = stack(feats)
    assert not torch.equal(before[1], after[1])
    for l in (0, 2, 3):
        assert torch.equal(before[l], after[l])


def test_expert_level_errors():
    with pytest.raises(LevelError):
        ExpertHead(5, 2)
    stack = ExpertStack(2)
    with pytest.raises(LevelError):
        stack.head(5)
    with pytest.raises(LevelError):
        stack.head(0)


def test_build_skip_widths_and_order():
    mods = [torch.full((1, 4, 8, 8, 8), float(i)) for i in range(4)]
    expert = torch.full((1, 4, 8, 8, 8), 9.0)
    skip = build_skip(1, mods, expert)
    assert skip.shape == (1, 20, 8, 8, 8)
    for i in range(4):
        assert (skip[:, 4 * i:4 * (i + 1)] == float(i)).all()
    assert (skip[:, 16:] == 9.0).all()


def test_build_skip_expert_locality():
    torch.manual_seed(2)
    mods = [torch.randn(1, 2, 4, 4, 4) for _ in range(4)]
    expert = torch.randn(1, 2, 4, 4, 4)
    with_e = build_skip(2, mods, expert)
    zeroed = build_skip(2, mods, torch.zeros_like(expert))
    assert torch.equal(with_e[:, :8], zeroed[:, :8])
    assert not torch.equal(with_e[:, 8:], zeroed[:, 8:])


def test_build_skip_permutation_contract():
    torch.manual_seed(3)
    mods = [torch.randn(1, 2, 4, 4, 4) for _ in range(4)]
    expert = torch.randn(1, 2, 4, 4, 4)
    base = build_skip(3, mods, expert)
    swapped = build_skip(3, [mods[1], mods[0], mods[2], mods[3]], expert)
    assert torch.equal(swapped[:, 0:2], base[:, 2:4])
    assert torch.equal(swapped[:, 2:4], base[:, 0:2])
    assert torch.equal(swapped[:, 4:], base[:, 4:])


def test_build_skip_errors():
    mods = [torch.zeros(1, 2, 4, 4, 4)] * 4
    expert = torch.zeros(1, 2, 4, 4, 4)
    with pytest.raises(LevelError):
        build_skip(5, mods, expert)
    with pytest.raises(ShapeError):
        build_skip(1, mods[:3], expert)
    with pytest.raises(ShapeError):
        build_skip(1, mods, torch.zeros(1, 2, 2, 2, 2))


def test_stack_runs_levels_1_to_4():
    stack = ExpertStack(2)
    feats = [torch.randn(1, 2 * 2 ** l, 16 // 2 ** l, 16 // 2 ** l, 16 // 2 ** l)
             for l in range(5)]
    maps, integrated = stack(feats)
    assert len(maps) == len(integrated) == 4
    for l, (m, f) in enumerate(zip(maps, integrated)):
        assert m.shape[1] == 4
        assert f.shape == feats[l].shape
    assert EXPERT_LEVELS == (1, 2, 3, 4)

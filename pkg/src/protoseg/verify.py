"""Verification suites: finite-difference gradient checks, brute-force
oracle comparisons, normalization invariants, and determinism contracts.

Each suite returns a list of CheckResult records; the CLI prints one line
per record and exits non-zero on any failure. Gradient checks run in float64
on tiny instances, comparing autograd against central finite differences on
a seeded random sample of elements per tensor.
"""

from dataclasses import dataclass, replace

import numpy as np
import torch

from . import oracles
from .attention import CrossModalAttention, TokenSelfAttention, flatten_grid
from .backbone import ConvBlock, Decoder, Encoder
from .config import MODALITIES, LossConfig, ModelConfig, PhantomSpec, TrainConfig
from .errors import VerificationFailure
from .experts import ExpertHead
from .fusion import ModalAssembler, ModalityFuser, PrototypeGate
from .losses import (ctp_loss, deep_supervision_loss, dice_loss, expert_loss,
                     one_hot_field, share_loss, total_loss, weighted_ce)
from .metrics import dice_score, hd95
from .network import SegmentationNetwork
from .phantom import generate_phantom
from .prototypes import RegionMapHead, compute_prototype
from .training import Trainer, tta_infer


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.suite}:{self.name} {self.detail}".rstrip()


def check_gradients(loss_fn, tensors, step=1e-4, rtol=1e-4, atol=1e-7,
                    samples=4, seed=0):
    """Compare autograd gradients of loss_fn() against central finite
    differences on sampled elements of each named tensor.

    Returns (passed, max_relative_error, worst_description). Relative error
    is tracked where the larger of the two gradients exceeds 1e-6; below
    that, the absolute tolerance governs.
    """
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    passed, max_rel, worst = True, 0.0, ""

    def fd_at(flat, i, h):
        orig = flat[i].item()
        flat[i] = orig + h
        f_plus = loss_fn().item()
        flat[i] = orig - h
        f_minus = loss_fn().item()
        flat[i] = orig
        return (f_plus - f_minus) / (2.0 * h)

    for (name, t), g in zip(tensors.items(), grads):
        flat = t.detach().reshape(-1)
        gflat = g.reshape(-1) if g is not None else torch.zeros_like(flat)
        n = flat.numel()
        idxs = rng.choice(n, size=min(samples, n), replace=False)
        for i in idxs:
            analytic = gflat[i].item()
            numeric = fd_at(flat, i, step)
            err = abs(analytic - numeric)
            denom = max(abs(analytic), abs(numeric))
            if err > atol + rtol * denom:
                # a LeakyReLU kink inside the step window poisons the
                # estimate; a real gradient bug persists at any step
                numeric = fd_at(flat, i, step / 100.0)
                err = abs(analytic - numeric)
                denom = max(abs(analytic), abs(numeric))
            if denom > 1e-6:
                max_rel = max(max_rel, err / denom)
            if err > atol + rtol * denom:
                passed = False
                worst = (f"{name}[{int(i)}] autograd={analytic:.6g} "
                         f"fd={numeric:.6g}")
    return passed, max_rel, worst


def _coef_like(out, gen):
    return torch.randn(out.shape, generator=gen, dtype=out.dtype)


def _randomize(module, gen, scale=0.3):
    """Move parameters off their init point (zero biases put normalization
    outputs exactly on the LeakyReLU kink, where no gradient exists)."""
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def _grad_case(name, module, loss_fn, tensors, results, samples=4):
    ok, rel, worst = check_gradients(loss_fn, tensors, samples=samples)
    detail = f"max_rel_err={rel:.2e}" + (f" ({worst})" if worst else "")
    results.append(CheckResult("gradients", name, ok, detail))


def gradient_suite(seed=0):
    """Finite-difference checks for every differentiable operation."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    results = []
    dt = torch.float64

    def params_of(mod, prefix):
        return {f"{prefix}.{n}": p for n, p in mod.named_parameters()}

    # encoder block (stride-2 conv, instance norm, LeakyReLU x2)
    block = _randomize(ConvBlock(2, 4, stride=2).double(), gen)
    x = torch.randn(1, 2, 4, 4, 4, generator=gen, dtype=dt, requires_grad=True)
    coef = _coef_like(block(x), gen)
    _grad_case("encoder_block", block, lambda: (block(x) * coef).sum(),
               {**params_of(block, "block"), "input": x}, results)

    # decoder on a tiny ladder (4^3 input scale, supervision heads included)
    dec = _randomize(Decoder(2, in_width=4, skip_widths=[2, 4, 8, 16], supervision=True).double(), gen)
    dec.eval()
    bott = torch.randn(1, 4, 1, 1, 1, generator=gen, dtype=dt, requires_grad=True)
    skips = [torch.randn(1, w, 16 // 2 ** l, 16 // 2 ** l, 16 // 2 ** l,
                         generator=gen, dtype=dt, requires_grad=True)
             for l, w in zip(range(4), [2, 4, 8, 16])]
    dcoef = None

    def dec_loss():
        nonlocal dcoef
        probs, aux = dec(bott, skips)
        outs = [probs] + aux
        if dcoef is None:
            dcoef = [_coef_like(o, gen) for o in outs]
        return sum((o * c).sum() for o, c in zip(outs, dcoef))

    _grad_case("decoder", dec, dec_loss,
               {**params_of(dec, "dec"), "bottleneck": bott}, results, samples=2)

    # self-attention (pre-norm residual)
    sa = _randomize(TokenSelfAttention(8, 2).double(), gen)
    toks = torch.randn(1, 4, 8, generator=gen, dtype=dt, requires_grad=True)
    scoef = _coef_like(sa(toks), gen)
    _grad_case("self_attend", sa, lambda: (sa(toks) * scoef).sum(),
               {**params_of(sa, "sa"), "tokens": toks}, results)

    # cross-attention between two token sequences
    ca = _randomize(CrossModalAttention(8, 2).double(), gen)
    cur = torch.randn(1, 4, 8, generator=gen, dtype=dt, requires_grad=True)
    oth = torch.randn(1, 4, 8, generator=gen, dtype=dt, requires_grad=True)
    ccoef = _coef_like(ca(cur, oth), gen)
    _grad_case("cross_attend", ca, lambda: (ca(cur, oth) * ccoef).sum(),
               {**params_of(ca, "ca"), "current": cur, "other": oth}, results)

    # FFN + region map head
    head = _randomize(RegionMapHead(8, ffn_ratio=2, dropout=0.0).double(), gen)
    head.eval()
    htoks = torch.randn(1, 8, 8, generator=gen, dtype=dt, requires_grad=True)
    fcoef, pcoef = None, None

    def head_loss():
        nonlocal fcoef, pcoef
        feats, probs = head(htoks, (2, 2, 2))
        if fcoef is None:
            fcoef, pcoef = _coef_like(feats, gen), _coef_like(probs, gen)
        return (feats * fcoef).sum() + (probs * pcoef).sum()

    _grad_case("generate_region_maps", head, head_loss,
               {**params_of(head, "head"), "tokens": htoks}, results)

    # prototype pooling (inputs only; the op has no parameters)
    feats = torch.randn(1, 3, 2, 2, 2, generator=gen, dtype=dt, requires_grad=True)
    pmap = torch.rand(1, 2, 2, 2, generator=gen, dtype=dt).requires_grad_()
    vcoef = torch.randn(1, 3, generator=gen, dtype=dt)
    _grad_case("compute_prototype", None,
               lambda: (compute_prototype(feats, pmap) * vcoef).sum(),
               {"features": feats, "prob_map": pmap}, results)

    # prototype gate (activation map + highlight)
    gate = _randomize(PrototypeGate(6).double(), gen)
    gfeat = torch.randn(1, 6, 2, 2, 2, generator=gen, dtype=dt, requires_grad=True)
    proto = torch.randn(1, 6, generator=gen, dtype=dt, requires_grad=True)
    gcoef = None

    def gate_loss():
        nonlocal gcoef
        act, high = gate(gfeat, proto)
        if gcoef is None:
            gcoef = (_coef_like(act, gen), _coef_like(high, gen))
        return (act * gcoef[0]).sum() + (high * gcoef[1]).sum()

    _grad_case("drive_with_prototype", gate, gate_loss,
               {**params_of(gate, "gate"), "features": gfeat, "proto": proto}, results)

    # modal assembly of the three highlighted maps
    asm = _randomize(ModalAssembler(4, 6).double(), gen)
    highs = [torch.randn(1, 4, 2, 2, 2, generator=gen, dtype=dt, requires_grad=True)
             for _ in range(3)]
    acoef = _coef_like(asm(highs), gen)
    _grad_case("assemble_modal_features", asm, lambda: (asm(highs) * acoef).sum(),
               {**params_of(asm, "asm"), "h0": highs[0], "h1": highs[1],
                "h2": highs[2]}, results)

    # cross-modality fusion attention
    fuser = _randomize(ModalityFuser(2, heads=2, fusion_width=4, residual=True).double(), gen)
    mods = [torch.randn(1, 2, 2, 2, 2, generator=gen, dtype=dt, requires_grad=True)
            for _ in range(4)]
    mcoef = _coef_like(fuser(mods), gen)
    _grad_case("fuse_modalities", fuser, lambda: (fuser(mods) * mcoef).sum(),
               {**params_of(fuser, "fuser"), "m0": mods[0], "m3": mods[3]}, results)

    # expert head (classification + integration)
    exp = _randomize(ExpertHead(1, 2).double(), gen)
    efeat = torch.randn(1, 2, 4, 4, 4, generator=gen, dtype=dt, requires_grad=True)
    ecoef = None

    def exp_loss():
        nonlocal ecoef
        maps, integ = exp(efeat)
        if ecoef is None:
            ecoef = (_coef_like(maps, gen), _coef_like(integ, gen))
        return (maps * ecoef[0]).sum() + (integ * ecoef[1]).sum()

    _grad_case("expert_head", exp, exp_loss,
               {**params_of(exp, "exp"), "features": efeat}, results)

    # losses, differentiated through softmax logits on 2-voxel instances
    w = LossConfig()
    labels2 = torch.tensor([[[[1, 3]]]])
    truth2 = one_hot_field(labels2).double()
    logits = torch.randn(1, 4, 1, 1, 2, generator=gen, dtype=dt, requires_grad=True)
    _grad_case("dice_loss", None,
               lambda: dice_loss(torch.softmax(logits, 1), truth2, w),
               {"logits": logits}, results, samples=8)
    _grad_case("weighted_ce", None,
               lambda: weighted_ce(torch.softmax(logits, 1), truth2, w),
               {"logits": logits}, results, samples=8)

    labels8 = torch.from_numpy(
        np.random.default_rng(seed).integers(0, 4, size=(1, 8, 8, 8)))
    ctp_logits = [torch.randn(1, 4, 2, 2, 2, generator=gen, dtype=dt, requires_grad=True)
                  for _ in range(4)]
    _grad_case("ctp_loss", None,
               lambda: ctp_loss([torch.softmax(z, 1) for z in ctp_logits], labels8, w),
               {f"m{i}": z for i, z in enumerate(ctp_logits)}, results, samples=2)

    share_logits = [torch.randn(1, 4, 8, 8, 8, generator=gen, dtype=dt, requires_grad=True)
                    for _ in range(5)]
    _grad_case("share_loss", None,
               lambda: share_loss([torch.softmax(z, 1) for z in share_logits], labels8, w),
               {f"s{i}": z for i, z in enumerate(share_logits)}, results, samples=2)

    sizes = [8, 4, 2, 1]
    exp_logits = [torch.randn(1, 4, s, s, s, generator=gen, dtype=dt, requires_grad=True)
                  for s in sizes]
    _grad_case("expert_loss", None,
               lambda: expert_loss([torch.softmax(z, 1) for z in exp_logits], labels8, w),
               {f"l{i}": z for i, z in enumerate(exp_logits)}, results, samples=2)

    deep_logits = [torch.randn(1, 4, s, s, s, generator=gen, dtype=dt, requires_grad=True)
                   for s in [1, 2, 4, 8, 8]]
    _grad_case("deep_supervision_loss", None,
               lambda: deep_supervision_loss(
                   [torch.softmax(z, 1) for z in deep_logits], labels8, w),
               {f"b{i}": z for i, z in enumerate(deep_logits)}, results, samples=2)

    _grad_case("total_loss", None,
               lambda: total_loss(
                   ctp_loss([torch.softmax(z, 1) for z in ctp_logits], labels8, w),
                   share_loss([torch.softmax(z, 1) for z in share_logits], labels8, w),
                   expert_loss([torch.softmax(z, 1) for z in exp_logits], labels8, w),
                   deep_supervision_loss(
                       [torch.softmax(z, 1) for z in deep_logits], labels8, w)),
               {"ctp_m0": ctp_logits[0], "share_s0": share_logits[0],
                "exp_l0": exp_logits[0], "deep_b0": deep_logits[0]}, results, samples=2)

    return results


# -- oracle comparisons ------------------------------------------------------


def _mha_weights(mha):
    return (mha.q_proj.weight.detach().numpy().T,
            mha.k_proj.weight.detach().numpy().T,
            mha.v_proj.weight.detach().numpy().T,
            mha.out_proj.weight.detach().numpy().T)


def oracle_suite(seed=0, instances=100):
    rng = np.random.default_rng(seed)
    results = []

    # self-attention vs loop oracle (pre-norm residual)
    worst = 0.0
    for _ in range(instances):
        heads = int(rng.choice([1, 2, 4]))
        width = heads * int(rng.integers(1, 4))
        n = int(rng.integers(1, 6))
        sa = TokenSelfAttention(width, heads).double()
        toks = torch.from_numpy(rng.standard_normal((1, n, width)))
        ours = sa(toks).detach().numpy()[0]
        normed = oracles.layer_norm(toks.numpy()[0],
                                    sa.norm.weight.detach().numpy(),
                                    sa.norm.bias.detach().numpy())
        ref = toks.numpy()[0] + oracles.multi_head_attention(
            normed, normed, *_mha_weights(sa.attn), heads)
        worst = max(worst, float(np.abs(ours - ref).max()))
    results.append(CheckResult("oracles", "self_attend", worst < 1e-6,
                               f"max_abs_err={worst:.2e} ({instances} instances)"))

    # cross-attention vs loop oracle
    worst = 0.0
    for _ in range(instances):
        heads = int(rng.choice([1, 2, 4]))
        width = heads * int(rng.integers(1, 4))
        n = int(rng.integers(1, 6))
        ca = CrossModalAttention(width, heads).double()
        cur = torch.from_numpy(rng.standard_normal((1, n, width)))
        oth = torch.from_numpy(rng.standard_normal((1, n, width)))
        ours = ca(cur, oth).detach().numpy()[0]
        nq = oracles.layer_norm(cur.numpy()[0], ca.norm_q.weight.detach().numpy(),
                                ca.norm_q.bias.detach().numpy())
        nkv = oracles.layer_norm(oth.numpy()[0], ca.norm_kv.weight.detach().numpy(),
                                 ca.norm_kv.bias.detach().numpy())
        ref = oracles.multi_head_attention(nq, nkv, *_mha_weights(ca.attn), heads)
        worst = max(worst, float(np.abs(ours - ref).max()))
    results.append(CheckResult("oracles", "cross_attend", worst < 1e-6,
                               f"max_abs_err={worst:.2e} ({instances} instances)"))

    # fusion attention (concat + MHSA + residual + 1x1x1 projection)
    worst = 0.0
    for _ in range(instances):
        heads = int(rng.choice([1, 2]))
        bw = heads * int(rng.integers(1, 3))
        fuser = ModalityFuser(bw, heads, fusion_width=3, residual=True).double()
        mods = [torch.from_numpy(rng.standard_normal((1, bw, 2, 2, 2)))
                for _ in range(4)]
        ours = fuser(mods).detach().numpy()[0]
        grid = np.concatenate([m.numpy()[0] for m in mods], axis=0)
        toks = grid.reshape(4 * bw, -1).T
        attended = toks + oracles.multi_head_attention(
            toks, toks, *_mha_weights(fuser.attn), heads)
        pw = fuser.project.weight.detach().numpy()[:, :, 0, 0, 0]
        pb = fuser.project.bias.detach().numpy()
        ref = (attended @ pw.T + pb).T.reshape(3, 2, 2, 2)
        worst = max(worst, float(np.abs(ours - ref).max()))
    results.append(CheckResult("oracles", "fuse_modalities", worst < 1e-6,
                               f"max_abs_err={worst:.2e} ({instances} instances)"))

    # prototype pooling vs triple loop
    worst = 0.0
    for _ in range(instances):
        c = int(rng.integers(1, 4))
        feats = rng.standard_normal((c, 2, 2, 2))
        pmap = rng.random((2, 2, 2))
        ours = compute_prototype(torch.from_numpy(feats[None]),
                                 torch.from_numpy(pmap[None])).numpy()[0]
        ref = oracles.region_prototype(feats, pmap)
        worst = max(worst, float(np.abs(ours - ref).max()))
    results.append(CheckResult("oracles", "compute_prototype", worst < 1e-6,
                               f"max_abs_err={worst:.2e} ({instances} instances)"))

    # expert integration vs loop convolution
    worst = 0.0
    for _ in range(instances):
        exp = ExpertHead(1, 2).double()   # width 2
        feat = rng.standard_normal((2, 3, 3, 3))
        logits = rng.standard_normal((4, 3, 3, 3))
        e = np.exp(logits - logits.max(axis=0, keepdims=True))
        maps = e / e.sum(axis=0, keepdims=True)
        ours = exp.integrate(torch.from_numpy(feat[None]),
                             torch.from_numpy(maps[None])).detach().numpy()[0]
        merge, integ = exp.integrate_conv[0], exp.integrate_conv[1]
        ref = oracles.expert_integration(
            feat, maps,
            merge.weight.detach().numpy(), merge.bias.detach().numpy(),
            integ.weight.detach().numpy(), integ.bias.detach().numpy())
        worst = max(worst, float(np.abs(ours - ref).max()))
    results.append(CheckResult("oracles", "integrate_expert_features", worst < 1e-6,
                               f"max_abs_err={worst:.2e} ({instances} instances)"))

    results.extend(metric_oracle_suite(seed=seed + 1, instances=instances))
    return results


def metric_oracle_suite(seed=0, instances=100):
    rng = np.random.default_rng(seed)
    results = []
    dice_exact = True
    hd_worst = 0.0
    for _ in range(instances):
        a = rng.random((8, 8, 8)) < rng.uniform(0.05, 0.5)
        b = rng.random((8, 8, 8)) < rng.uniform(0.05, 0.5)
        if dice_score(a, b) != oracles.dice_overlap(a, b):
            dice_exact = False
        ours = hd95(a, b)
        ref = oracles.hd95_all_pairs(a, b)
        hd_worst = max(hd_worst, abs(ours - ref))
    results.append(CheckResult("metrics", "dice_score", dice_exact,
                               f"exact on {instances} random 8^3 pairs"))
    results.append(CheckResult("metrics", "hd95", hd_worst < 1e-9,
                               f"max_abs_err={hd_worst:.2e} ({instances} pairs)"))
    return results


# -- normalization invariants ------------------------------------------------


def normalization_suite(seed=0, configs=20):
    rng = np.random.default_rng(seed)
    results = []
    worst_sum = 0.0
    min_act = 0.0
    worst_tta = 0.0
    for i in range(configs):
        torch.manual_seed(seed + i)
        heads = int(rng.choice([1, 2, 4]))
        base = int(rng.choice([2, 3]))
        cfg = ModelConfig(base_channels=base, heads=heads,
                          token_width=heads * int(rng.integers(2, 5)),
                          per_channel_gates=bool(rng.integers(2)),
                          fusion_residual=bool(rng.integers(2)),
                          ffn_dropout=0.0)
        model = SegmentationNetwork(cfg)
        model.eval()
        x = torch.from_numpy(rng.standard_normal((1, 4, 16, 16, 16)).astype(np.float32))
        with torch.no_grad():
            out = model(x, internals=True)
        fields = [out.seg_probs, *out.deep_supervision,
                  *out.prototype_maps.values(), *out.expert_maps,
                  *out.share_probs.values()]
        for f in fields:
            worst_sum = max(worst_sum, float((f.sum(dim=1) - 1).abs().max()))
        min_act = min(min_act, min(float(a.min()) for a in out.activations.values()))
        if i < 3:
            tta = tta_infer(model, x, enabled=True)
            worst_tta = max(worst_tta, float((tta.sum(dim=1) - 1).abs().max()))
    results.append(CheckResult("normalization", "probability_fields",
                               worst_sum <= 1e-5,
                               f"max |sum-1|={worst_sum:.2e} over {configs} configs"))
    results.append(CheckResult("normalization", "tta_average", worst_tta <= 1e-5,
                               f"max |sum-1|={worst_tta:.2e}"))
    results.append(CheckResult("normalization", "activation_nonnegative",
                               min_act >= 0.0, f"min activation={min_act:.2e}"))
    return results


# -- determinism --------------------------------------------------------------


def determinism_suite(seed=0, steps=5):
    results = []
    spec = PhantomSpec(seed=seed)
    a = generate_phantom(spec, "det")
    b = generate_phantom(spec, "det")
    same_phantom = all(
        np.array_equal(a.volumes[m].voxels, b.volumes[m].voxels) for m in MODALITIES
    ) and np.array_equal(a.labels, b.labels)
    results.append(CheckResult("determinism", "phantom_bit_identical", same_phantom))

    cfg = TrainConfig(seed=seed, total_epochs=max(10, steps), base_lr=1e-3,
                      crop=(16, 16, 16),
                      model=ModelConfig(base_channels=2, heads=2))
    spec16 = PhantomSpec(grid_size=(16, 16, 16), radii=(2.0, 3.5, 5.0),
                         center_jitter=0.5, brain_margin=2.0, seed=seed)
    cases = [generate_phantom(replace(spec16, seed=seed + i), f"c{i}") for i in range(2)]
    runs = []
    for _ in range(2):
        trainer = Trainer(cfg, cases)
        runs.append([b.total for b in trainer.run_steps(steps)])
    diff = max(abs(x - y) for x, y in zip(*runs))
    results.append(CheckResult("determinism", "training_loss_repeat", diff <= 1e-6,
                               f"max step diff={diff:.2e} over {steps} steps"))
    return results


SUITES = {
    "gradients": gradient_suite,
    "oracles": oracle_suite,
    "metrics": metric_oracle_suite,
    "normalization": normalization_suite,
    "determinism": determinism_suite,
}


def run_suites(names=None, seed=0):
    names = list(names) if names else ["gradients", "oracles", "normalization",
                                       "determinism"]
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise VerificationFailure(f"unknown suites: {unknown}")
    results = []
    for name in names:
        results.extend(SUITES[name](seed=seed))
    return results

"""Brute-force reference implementations for verification.

Everything here is written as explicit loops over tokens, heads, voxels, and
kernel offsets, independent of the tensor-library code paths it checks.
Numpy only; no calls into the attention/backbone/metrics modules.
"""

import numpy as np

LN_EPS = 1e-5


def layer_norm(x, gamma, beta):
    """Per-row layer normalization with biased variance."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        row = x[i]
        mu = row.mean()
        var = row.var()
        out[i] = (row - mu) / np.sqrt(var + LN_EPS) * gamma + beta
    return out


def multi_head_attention(q_in, kv_in, wq, wk, wv, wo, heads):
    """Head-by-head softmax(Q K^T / sqrt(d)) V with concatenation and output
    projection, all via explicit loops.

    q_in: (N, C); kv_in: (M, C); wq/wk/wv/wo: (C, C) applied as x @ W.
    """
    q_in = np.asarray(q_in, dtype=np.float64)
    kv_in = np.asarray(kv_in, dtype=np.float64)
    n, c = q_in.shape
    m = kv_in.shape[0]
    d = c // heads
    q_all = q_in @ wq
    k_all = kv_in @ wk
    v_all = kv_in @ wv
    concat = np.zeros((n, c))
    for h in range(heads):
        cols = slice(h * d, (h + 1) * d)
        q, k, v = q_all[:, cols], k_all[:, cols], v_all[:, cols]
        for i in range(n):
            scores = np.array([q[i] @ k[j] / np.sqrt(d) for j in range(m)])
            scores = np.exp(scores - scores.max())
            weights = scores / scores.sum()
            out = np.zeros(d)
            for j in range(m):
                out += weights[j] * v[j]
            concat[i, cols] = out
    return concat @ wo


def region_prototype(features, prob_map):
    """Triple-loop version of the probability-weighted feature pooling:
    per channel, sum over all voxels of feature * probability, divided by
    the voxel count."""
    features = np.asarray(features, dtype=np.float64)
    prob_map = np.asarray(prob_map, dtype=np.float64)
    c, h, w, d = features.shape
    vec = np.zeros(c)
    for ch in range(c):
        acc = 0.0
        for i in range(h):
            for j in range(w):
                for k in range(d):
                    acc += features[ch, i, j, k] * prob_map[i, j, k]
        vec[ch] = acc / (h * w * d)
    return vec


def conv3d(x, weight, bias, padding):
    """Direct convolution by loops: x (Cin, H, W, D),
    weight (Cout, Cin, kh, kw, kd)."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    cout, cin, kh, kw, kd = weight.shape
    h, w, d = x.shape[1:]
    xp = np.zeros((cin, h + 2 * padding, w + 2 * padding, d + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w, padding:padding + d] = x
    out = np.zeros((cout, h, w, d))
    for co in range(cout):
        for i in range(h):
            for j in range(w):
                for k in range(d):
                    acc = bias[co]
                    for ci in range(cin):
                        for a in range(kh):
                            for b in range(kw):
                                for c_ in range(kd):
                                    acc += weight[co, ci, a, b, c_] * xp[ci, i + a, j + b, k + c_]
                    out[co, i, j, k] = acc
    return out


def expert_integration(feat, maps, merge_w, merge_b, integ_w, integ_b):
    """Masked-concat-conv evaluation: mask the features with the three tumor
    probabilities, concatenate, 3x3x3 conv, then 1x1x1 conv."""
    feat = np.asarray(feat, dtype=np.float64)
    maps = np.asarray(maps, dtype=np.float64)
    masked = np.concatenate([feat * maps[k][None] for k in (1, 2, 3)], axis=0)
    mid = conv3d(masked, merge_w, merge_b, padding=1)
    return conv3d(mid, integ_w, integ_b, padding=0)


def dice_overlap(a, b):
    """Counting-loop Dice with the both-empty convention."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    inter = size_a = size_b = 0
    for idx in np.ndindex(a.shape):
        if a[idx]:
            size_a += 1
        if b[idx]:
            size_b += 1
        if a[idx] and b[idx]:
            inter += 1
    if size_a + size_b == 0:
        return 1.0
    return 2.0 * inter / (size_a + size_b)


def surface_points(mask):
    """Coordinates of mask voxels with a 6-connected non-mask neighbor."""
    mask = np.asarray(mask, dtype=bool)
    pts = []
    h, w, d = mask.shape
    for i in range(h):
        for j in range(w):
            for k in range(d):
                if not mask[i, j, k]:
                    continue
                on_surface = False
                for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    ni, nj, nk = i + di, j + dj, k + dk
                    if not (0 <= ni < h and 0 <= nj < w and 0 <= nk < d) \
                            or not mask[ni, nj, nk]:
                        on_surface = True
                        break
                if on_surface:
                    pts.append((i, j, k))
    return pts


def hd95_all_pairs(a, b, spacing=(1.0, 1.0, 1.0), empty_penalty=None):
    """All-pairs symmetric 95th-percentile surface distance."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        if empty_penalty is None:
            empty_penalty = float(np.sqrt(
                sum(((s - 1) * sp) ** 2 for s, sp in zip(a.shape, spacing))))
        return float(empty_penalty)
    pa = surface_points(a)
    pb = surface_points(b)

    def nearest(p, points):
        best = np.inf
        for q in points:
            d2 = sum(((pi - qi) * sp) ** 2 for pi, qi, sp in zip(p, q, spacing))
            best = min(best, d2)
        return np.sqrt(best)

    pooled = [nearest(p, pb) for p in pa] + [nearest(q, pa) for q in pb]
    return float(np.percentile(pooled, 95))

"""Independent reference implementations used to check the package kernels.

Everything here is written as plain loops over Python floats (or numpy
scalars) directly from the defining formulas, deliberately avoiding the
vectorized torch paths the package uses.  Keep it slow and obvious.
"""

import math

import numpy as np


def gaussian_weights_oracle(ranges, n_frames, sigma_half=False):
    """Direct-formula Gaussian range weights, normalized per frame row."""
    k = len(ranges)
    out = np.zeros((n_frames, k), dtype=np.float64)
    for i in range(1, n_frames + 1):
        row = []
        for start, end in ranges:
            mu = (start + end) / 2.0
            sigma = max(float(end - start + 1), 1.0)
            if sigma_half:
                sigma = max(sigma / 2.0, 1.0)
            row.append(math.exp(-((i - mu) ** 2) / (2.0 * sigma * sigma)))
        total = sum(row)
        for j in range(k):
            out[i - 1, j] = row[j] / total
    return out


def linear_oracle(x, weight, bias):
    """y[., o] = bias[o] + sum_i weight[o, i] * x[., i] over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    d_out = weight.shape[0]
    out = np.zeros((flat.shape[0], d_out), dtype=np.float64)
    for r in range(flat.shape[0]):
        for o in range(d_out):
            acc = 0.0 if bias is None else float(bias[o])
            for i in range(x.shape[-1]):
                acc += float(weight[o, i]) * float(flat[r, i])
            out[r, o] = acc
    return out.reshape(*lead, d_out)


def lora_oracle(x, layer):
    """base(x) + (alpha / rank) * B(A(x)) with every product spelled out."""
    base_w = layer.base.weight.detach().numpy()
    base_b = layer.base.bias.detach().numpy() if layer.base.bias is not None else None
    a = layer.lora_A.detach().numpy()
    b = layer.lora_B.detach().numpy()
    base = linear_oracle(x, base_w, base_b)
    low = linear_oracle(x, a, None)
    delta = linear_oracle(low, b, None)
    return base + (layer.alpha / layer.rank) * delta


def softmax_oracle(scores):
    """Row-wise softmax over the last axis of a 1-D list of floats."""
    m = max(scores)
    exps = [math.exp(s - m) for s in scores]
    total = sum(exps)
    return [e / total for e in exps]


def attention_oracle(q_in, kv_in, block):
    """Multi-head attention recomputed per (batch, head, query) with loops."""
    q_in = np.asarray(q_in, dtype=np.float64)
    kv_in = np.asarray(kv_in, dtype=np.float64)
    wq = block.q_proj.weight.detach().numpy()
    bq = block.q_proj.bias.detach().numpy()
    wk = block.k_proj.weight.detach().numpy()
    bk = block.k_proj.bias.detach().numpy()
    wv = block.v_proj.weight.detach().numpy()
    bv = block.v_proj.bias.detach().numpy()
    wo = block.out_proj.weight.detach().numpy()
    bo = block.out_proj.bias.detach().numpy()

    lead = q_in.shape[:-2]
    lq, lk = q_in.shape[-2], kv_in.shape[-2]
    q_flat = q_in.reshape(-1, lq, q_in.shape[-1])
    kv_flat = kv_in.reshape(-1, lk, kv_in.shape[-1])
    n_heads, head_dim = block.n_heads, block.head_dim
    dim = block.dim

    out = np.zeros((q_flat.shape[0], lq, dim), dtype=np.float64)
    for bi in range(q_flat.shape[0]):
        q = linear_oracle(q_flat[bi], wq, bq)
        k = linear_oracle(kv_flat[bi], wk, bk)
        v = linear_oracle(kv_flat[bi], wv, bv)
        for h in range(n_heads):
            sl = slice(h * head_dim, (h + 1) * head_dim)
            for iq in range(lq):
                scores = []
                for ik in range(lk):
                    dot = 0.0
                    for d in range(head_dim):
                        dot += q[iq, sl][d] * k[ik, sl][d]
                    scores.append(dot / math.sqrt(head_dim))
                weights = softmax_oracle(scores)
                for d in range(head_dim):
                    acc = 0.0
                    for ik in range(lk):
                        acc += weights[ik] * v[ik, sl][d]
                    out[bi, iq, h * head_dim + d] = acc
        out[bi] = linear_oracle(out[bi], wo, bo)
    return out.reshape(*lead, lq, dim)


def layernorm_oracle(x, weight, bias, eps=1e-5):
    """Per-token normalization over the last axis, biased variance."""
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    d = x.shape[-1]
    flat = x.reshape(-1, d)
    out = np.zeros_like(flat)
    for r in range(flat.shape[0]):
        mean = sum(float(v) for v in flat[r]) / d
        var = sum((float(v) - mean) ** 2 for v in flat[r]) / d
        denom = math.sqrt(var + eps)
        for i in range(d):
            out[r, i] = (flat[r, i] - mean) / denom * float(weight[i]) + float(bias[i])
    return out.reshape(*lead, d)


def gelu_oracle(x):
    """Exact-erf GELU applied elementwise."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.array([0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))) for v in flat])
    return out.reshape(x.shape)


def feedforward_oracle(x, ffn):
    w1 = ffn.fc1.weight.detach().numpy()
    b1 = ffn.fc1.bias.detach().numpy()
    w2 = ffn.fc2.weight.detach().numpy()
    b2 = ffn.fc2.bias.detach().numpy()
    return linear_oracle(gelu_oracle(linear_oracle(x, w1, b1)), w2, b2)


def compose_frame_conditions_oracle(fused_state, f_t, weights, composer):
    """FrameComposer recomputed stage by stage with the loop primitives."""
    fused = np.asarray(fused_state, dtype=np.float64)
    f_t = np.asarray(f_t, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)

    tw = composer.t_proj.weight.detach().numpy()
    tb = composer.t_proj.bias.detach().numpy()
    f_t_proj = linear_oracle(f_t, tw, tb)

    b, k, l, d = f_t_proj.shape
    n = weights.shape[1]
    mixed = np.zeros((b, n, l, d), dtype=np.float64)
    for bi in range(b):
        for i in range(n):
            for j in range(k):
                for t in range(l):
                    for c in range(d):
                        mixed[bi, i, t, c] += weights[bi, i, j] * f_t_proj[bi, j, t, c]

    ls = fused.shape[1]
    x = np.zeros((b, n, ls + l, d), dtype=np.float64)
    for bi in range(b):
        for i in range(n):
            x[bi, i, :ls] = fused[bi]
            x[bi, i, ls:] = mixed[bi, i]

    nw = composer.norm_mlp.weight.detach().numpy()
    nb = composer.norm_mlp.bias.detach().numpy()
    x = x + feedforward_oracle(layernorm_oracle(x, nw, nb), composer.mlp)

    aw = composer.norm_attn.weight.detach().numpy()
    ab = composer.norm_attn.bias.detach().numpy()
    flat = x.reshape(b * n, ls + l, d)
    normed = layernorm_oracle(flat, aw, ab)
    flat = flat + attention_oracle(normed, normed, composer.attn)
    return flat.reshape(b, n, ls + l, d)


def downsample_mask_oracle(mask, hw):
    """Area-average pooling of a (..., H, W) mask by explicit block sums."""
    mask = np.asarray(mask, dtype=np.float64)
    h_out, w_out = hw
    lead = mask.shape[:-2]
    h_in, w_in = mask.shape[-2], mask.shape[-1]
    fh, fw = h_in // h_out, w_in // w_out
    flat = mask.reshape(-1, h_in, w_in)
    out = np.zeros((flat.shape[0], h_out, w_out), dtype=np.float64)
    for bi in range(flat.shape[0]):
        for r in range(h_out):
            for c in range(w_out):
                acc = 0.0
                for dr in range(fh):
                    for dc in range(fw):
                        acc += flat[bi, r * fh + dr, c * fw + dc]
                out[bi, r, c] = acc / (fh * fw)
    return out.reshape(*lead, h_out, w_out)


def frechet_oracle(mu_r, cov_r, mu_g, cov_g):
    """Fréchet distance via eigendecomposition of the symmetrized product."""
    mu_r = np.asarray(mu_r, dtype=np.float64)
    mu_g = np.asarray(mu_g, dtype=np.float64)
    diff = float(((mu_r - mu_g) ** 2).sum())
    prod = cov_r @ cov_g
    eigvals = np.linalg.eigvals(prod)
    trace_sqrt = float(np.sqrt(np.clip(eigvals.real, 0.0, None)).sum())
    return diff + float(np.trace(cov_r)) + float(np.trace(cov_g)) - 2.0 * trace_sqrt


def q_sample_moments(z0, t, schedule):
    """Closed-form mean and variance of q(z_t | z_0) per element."""
    abar = float(schedule.alpha_bar[t])
    return math.sqrt(abar) * np.asarray(z0), 1.0 - abar

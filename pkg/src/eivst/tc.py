"""Transition Conditioning: SQ-Formers, state fusion, Gaussian range weights,
and the per-frame condition composer feeding the denoiser's cross-attention.

Also hosts the two reduced conditioning paths used by ablations: broadcast
instruction-token embeddings (baseline) and broadcast transition-model
features without per-frame structure.
"""

import torch
import torch.nn as nn

from .errors import EmptyPlan, ShapeError, ValidationError
from .nn import AttentionBlock, FeedForward, TransformerBlock
from .rng import init_conv_, init_linear_, normal_
from .world import K_MAX, MAX_INSTRUCTION_LEN, VOCAB, proportional_partition


def gaussian_range_weights(ranges, n_frames, sigma_half=False, dtype=torch.float64,
                           stochastic=False, gen=None):
    """Per-frame convex weights over steps from Gaussian range densities.

    raw[i, j] = exp(-(i - mu_j)^2 / (2 sigma_j^2)) with mu_j the range center
    and sigma_j its length in frames (floored at 1; half-length when
    sigma_half is set), normalized across steps for every frame.

    With stochastic=True each raw density is scaled by a unit-exponential
    draw from gen before normalization (a training-time resampling mode;
    deterministic evaluation is the default).
    """
    k = len(ranges)
    if k == 0:
        raise EmptyPlan("gaussian_range_weights needs at least one range")
    if n_frames < 1:
        raise ValidationError("n_frames must be positive")
    for start, end in ranges:
        if not 1 <= start <= end <= n_frames:
            raise ValidationError(f"range [{start}, {end}] invalid for N={n_frames}")
    frames = torch.arange(1, n_frames + 1, dtype=dtype).unsqueeze(1)
    mu = torch.tensor([(s + e) / 2.0 for s, e in ranges], dtype=dtype)
    sigma = torch.tensor(
        [max(float(e - s + 1), 1.0) for s, e in ranges], dtype=dtype
    )
    if sigma_half:
        sigma = torch.clamp(sigma / 2.0, min=1.0)
    raw = torch.exp(-((frames - mu) ** 2) / (2.0 * sigma ** 2))
    if stochastic:
        if gen is None:
            raise ValidationError("stochastic weights require a generator")
        u = torch.rand(raw.shape, generator=gen, dtype=dtype)
        raw = raw * (-torch.log(u.clamp(min=1e-12)))
    return raw / raw.sum(dim=1, keepdim=True)


class SQFormer(nn.Module):
    """Learnable queries cross-attending to one frame plus its state tokens.

    A single instance serves both the initial and target calls, so the
    weight sharing the fusion relies on holds by construction.
    """

    def __init__(self, config, gen=None):
        super().__init__()
        d_c = config.tc_dim
        self.queries = nn.Parameter(torch.empty(config.tc_queries, d_c))
        if gen is not None:
            normal_(self.queries, 0.02, gen)
        self.patch_embed = nn.Conv2d(3, d_c, config.tvlm_patch_px,
                                     stride=config.tvlm_patch_px)
        self.state_proj = nn.Linear(config.tvlm_dim, d_c)
        if gen is not None:
            init_conv_(self.patch_embed, gen)
            init_linear_(self.state_proj, gen)
        self.blocks = nn.ModuleList(
            TransformerBlock(d_c, config.tc_heads, kv_dim=d_c, gen=gen)
            for _ in range(config.tc_state_blocks)
        )

    def forward(self, frame, state_tokens):
        patches = self.patch_embed(frame).flatten(2).transpose(1, 2)
        kv = torch.cat([patches, self.state_proj(state_tokens)], dim=1)
        x = self.queries.unsqueeze(0).expand(frame.shape[0], -1, -1)
        for block in self.blocks:
            x = block(x, kv=kv)
        return x


class StateFusion(nn.Module):
    """Concatenate role-tagged SQ-Former outputs and self-attend to F~S."""

    def __init__(self, config, gen=None):
        super().__init__()
        d_c = config.tc_dim
        self.position_tokens = nn.Parameter(torch.empty(2, d_c))
        if gen is not None:
            normal_(self.position_tokens, 0.02, gen)
        self.blocks = nn.ModuleList(
            TransformerBlock(d_c, config.tc_heads, gen=gen)
            for _ in range(config.tc_fuse_blocks)
        )

    def forward(self, tokens_init, tokens_target):
        x = torch.cat([
            tokens_init + self.position_tokens[0],
            tokens_target + self.position_tokens[1],
        ], dim=1)
        for block in self.blocks:
            x = block(x)
        return x


def mix_transition_features(f_t, weights):
    """F~T_i = sum_j W[i, j] * F^T_j, token-wise.

    f_t: (..., K, L, d); weights: (..., N, K) -> (..., N, L, d).
    """
    if f_t.shape[-3] != weights.shape[-1]:
        raise ShapeError(
            f"step count mismatch: features have {f_t.shape[-3]}, weights {weights.shape[-1]}"
        )
    return torch.einsum("...nk,...kld->...nld", weights, f_t)


class FrameComposer(nn.Module):
    """Concat fused state with mixed transition tokens, MLP, one Self-Attn."""

    def __init__(self, config, gen=None):
        super().__init__()
        d_c = config.tc_dim
        self.t_proj = nn.Linear(config.tvlm_dim, d_c)
        if gen is not None:
            init_linear_(self.t_proj, gen)
        self.norm_mlp = nn.LayerNorm(d_c)
        self.mlp = FeedForward(d_c, hidden=2 * d_c, gen=gen)
        self.norm_attn = nn.LayerNorm(d_c)
        self.attn = AttentionBlock(d_c, config.tc_heads, gen=gen)

    def forward(self, fused_state, f_t, weights):
        f_t = self.t_proj(f_t)
        mixed = mix_transition_features(f_t, weights)
        n = mixed.shape[-3]
        state = fused_state.unsqueeze(-3).expand(*fused_state.shape[:-2], n, *fused_state.shape[-2:])
        x = torch.cat([state, mixed], dim=-2)
        x = x + self.mlp(self.norm_mlp(x))
        lead = x.shape[:-2]
        flat = x.reshape(-1, x.shape[-2], x.shape[-1])
        flat = flat + self.attn(self.norm_attn(flat))
        return flat.reshape(*lead, x.shape[-2], x.shape[-1])


def compose_frame_conditions(fused_state, f_t, weights, composer):
    """Frame-wise conditions F~*_i from fused state, step features, weights."""
    return composer(fused_state, f_t, weights)


class TCModule(nn.Module):
    """Full conditioning pipeline from anchors and TVLM features to F~*_i."""

    def __init__(self, config, gen=None):
        super().__init__()
        self.sq_former = SQFormer(config, gen=gen)
        self.fusion = StateFusion(config, gen=gen)
        self.composer = FrameComposer(config, gen=gen)

    def forward(self, frame_1, frame_n, f_s1, f_sn, f_t, weights):
        tokens_init = self.sq_former(frame_1, f_s1)
        tokens_target = self.sq_former(frame_n, f_sn)
        fused = self.fusion(tokens_init, tokens_target)
        return self.composer(fused, f_t, weights)


def plan_weight_matrix(plans, n_frames, config, dtype=torch.float32,
                       stochastic=False, gen=None):
    """Stack per-sample Gaussian weights, zero-padded to K_MAX columns."""
    batch = torch.zeros(len(plans), n_frames, K_MAX, dtype=dtype)
    for b, plan in enumerate(plans):
        ranges = [(s.start, s.end) for s in plan.steps]
        w = gaussian_range_weights(ranges, n_frames,
                                   sigma_half=config.tc_sigma_half, dtype=dtype,
                                   stochastic=stochastic, gen=gen)
        batch[b, :, : len(ranges)] = w
    return batch


def uniform_plan_ranges(k, n_frames):
    """Uniform K-way partition used by the fixed-K ablation."""
    return proportional_partition([1.0] * k, n_frames, min_first=1)


class BaselineConditioner(nn.Module):
    """Instruction-token embeddings broadcast to every frame."""

    def __init__(self, config, gen=None):
        super().__init__()
        d_c = config.tc_dim
        self.tok_emb = nn.Embedding(len(VOCAB), d_c)
        self.tok_pos = nn.Parameter(torch.empty(MAX_INSTRUCTION_LEN, d_c))
        if gen is not None:
            normal_(self.tok_emb.weight, 0.02, gen)
            normal_(self.tok_pos, 0.02, gen)

    def forward(self, tokens, n_frames):
        x = self.tok_emb(tokens) + self.tok_pos[: tokens.shape[1]]
        return x.unsqueeze(1).expand(-1, n_frames, -1, -1)


class TvlmBroadcastConditioner(nn.Module):
    """Projected TVLM features, identical for every frame (no TC structure)."""

    def __init__(self, config, gen=None):
        super().__init__()
        self.proj = nn.Linear(config.tvlm_dim, config.tc_dim)
        if gen is not None:
            init_linear_(self.proj, gen)

    def forward(self, f_s1, f_sn, f_t, n_frames):
        tokens = torch.cat([f_s1, f_sn, f_t.mean(dim=1)], dim=1)
        x = self.proj(tokens)
        return x.unsqueeze(1).expand(-1, n_frames, -1, -1)

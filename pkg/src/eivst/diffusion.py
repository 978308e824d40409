"""Video diffusion: noise schedule, denoising U-Net with frame-wise
cross-attention and temporal attention, the localization head, the joint
training loss, and DDIM sampling with anchor replacement.

The U-Net runs at two resolutions; all 2D convolutions fold the frame axis
into the batch, so frames only interact through temporal attention.
"""

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .nn import AttentionBlock, sinusoidal_embedding
from .rng import init_conv_, init_linear_, normal_


class NoiseSchedule:
    """Linear-beta DDPM schedule; arrays are 1-indexed by timestep with
    alpha_bar[0] == 1 so t=0 is the identity."""

    def __init__(self, timesteps=1000, beta_start=1e-4, beta_end=2e-2):
        if not 0 < beta_start < beta_end < 1:
            raise ConfigError("beta schedule must satisfy 0 < start < end < 1")
        self.timesteps = timesteps
        betas = torch.zeros(timesteps + 1, dtype=torch.float64)
        betas[1:] = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bar = torch.cumprod(self.alphas, dim=0)
        diffs = self.alpha_bar[1:] - self.alpha_bar[:-1]
        if not (diffs < 0).all():
            raise ConfigError("alpha_bar must be strictly decreasing")

    def gather(self, t, like):
        """alpha_bar at integer timesteps t, broadcast against `like`."""
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t > self.timesteps).any():
            raise IndexError(f"timestep out of [0, {self.timesteps}]")
        ab = self.alpha_bar[t].to(like.dtype)
        shape = (-1,) + (1,) * (like.dim() - 1)
        return ab.reshape(shape) if ab.dim() else ab


def q_sample(z0, t, eps, schedule):
    """Forward diffusion draw z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 1).any() or (t > schedule.timesteps).any():
        raise IndexError(f"timestep out of [1, {schedule.timesteps}]")
    if eps.shape != z0.shape:
        raise ShapeError("noise shape must match z0")
    ab = schedule.gather(t, z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def _groups(channels):
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim, gen=None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        if gen is not None:
            init_conv_(self.conv1, gen)
            init_conv_(self.conv2, gen)
            init_linear_(self.emb_proj, gen)
            if isinstance(self.skip, nn.Conv2d):
                init_conv_(self.skip, gen)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TemporalAttention(nn.Module):
    """Self-attention over the frame axis at every spatial location."""

    def __init__(self, channels, n_heads, max_frames, gen=None):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = AttentionBlock(channels, n_heads, gen=gen)
        self.pos = nn.Parameter(torch.empty(max_frames, channels))
        if gen is not None:
            normal_(self.pos, 0.02, gen)

    def forward(self, x, batch, n_frames):
        bn, c, h, w = x.shape
        seq = x.reshape(batch, n_frames, c, h * w).permute(0, 3, 1, 2)
        seq = seq.reshape(batch * h * w, n_frames, c)
        seq = seq + self.attn(self.norm(seq + self.pos[:n_frames]))
        seq = seq.reshape(batch, h * w, n_frames, c).permute(0, 2, 3, 1)
        return seq.reshape(bn, c, h, w)


class DenoiserUNet(nn.Module):
    """Two-resolution residual U-Net over folded frames.

    Inputs carry 7 channels: the noisy frame, clean anchor content (nonzero
    only at the first and last frame), and an anchor indicator plane.  Every
    frame's spatial tokens cross-attend to that frame's condition tokens
    between the mid-resolution residual blocks.
    """

    def __init__(self, config, gen=None, use_temporal=True):
        super().__init__()
        c = config.denoiser_channels
        d_c = config.tc_dim
        heads = config.denoiser_heads
        emb = config.denoiser_emb_dim
        self.channels = c
        self.emb_dim = emb
        self.frame_rate = config.world_frame_rate

        self.emb_mlp = nn.Sequential(
            nn.Linear(2 * emb, 2 * emb), nn.SiLU(), nn.Linear(2 * emb, emb)
        )
        self.conv_in = nn.Conv2d(7, c, 3, padding=1)
        self.res1 = ResBlock(c, c, emb, gen=gen)
        self.down = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.res2 = ResBlock(2 * c, 2 * c, emb, gen=gen)

        self.cross_norm = nn.LayerNorm(2 * c)
        self.cross_cond_norm = nn.LayerNorm(d_c)
        self.cross_attn = AttentionBlock(2 * c, heads, kv_dim=d_c, gen=gen)
        self.temporal = (
            TemporalAttention(2 * c, heads, config.world_frames, gen=gen)
            if use_temporal else None
        )

        self.res3 = ResBlock(2 * c, 2 * c, emb, gen=gen)
        self.res4 = ResBlock(4 * c, 2 * c, emb, gen=gen)
        self.up_conv1 = nn.Conv2d(3 * c, c, 3, padding=1)
        self.up_conv2 = nn.Conv2d(c, 3, 3, padding=1)
        if gen is not None:
            init_conv_(self.conv_in, gen)
            init_conv_(self.down, gen)
            init_conv_(self.up_conv1, gen)
            init_conv_(self.up_conv2, gen)
            for layer in self.emb_mlp:
                if isinstance(layer, nn.Linear):
                    init_linear_(layer, gen)

    def forward(self, z_t, t, conditions, anchors, fr=None):
        """Predict the injected noise; also returns last-block features.

        z_t: (B, N, 3, H, W); t: (B,) timesteps; conditions: (B, N, L, d_c);
        anchors: (B, 2, 3, H, W) clean first/last frames.
        """
        b, n, _, h, w = z_t.shape
        if conditions.shape[0] != b or conditions.shape[1] != n:
            raise ShapeError(
                f"conditions shaped {tuple(conditions.shape[:2])}, expected ({b}, {n})"
            )
        fr = self.frame_rate if fr is None else fr
        anchor_planes = torch.zeros_like(z_t)
        anchor_planes[:, 0] = anchors[:, 0]
        anchor_planes[:, -1] = anchors[:, 1]
        indicator = torch.zeros(b, n, 1, h, w, dtype=z_t.dtype, device=z_t.device)
        indicator[:, 0] = 1.0
        indicator[:, -1] = 1.0
        x = torch.cat([z_t, anchor_planes, indicator], dim=2).reshape(b * n, 7, h, w)

        t = torch.as_tensor(t, dtype=torch.float64)
        t_emb = sinusoidal_embedding(t.reshape(b), self.emb_dim)
        fr_emb = sinusoidal_embedding(
            torch.full((b,), float(fr), dtype=torch.float64), self.emb_dim
        )
        emb = self.emb_mlp(torch.cat([t_emb, fr_emb], dim=-1).to(z_t.dtype))
        emb = emb.repeat_interleave(n, dim=0)

        h0 = self.conv_in(x)
        h1 = self.res1(h0, emb)
        h2 = self.res2(self.down(h1), emb)

        bn, c2, hh, ww = h2.shape
        tokens = h2.reshape(bn, c2, hh * ww).transpose(1, 2)
        cond = conditions.reshape(bn, conditions.shape[2], conditions.shape[3])
        tokens = tokens + self.cross_attn(self.cross_norm(tokens),
                                          self.cross_cond_norm(cond))
        h2 = tokens.transpose(1, 2).reshape(bn, c2, hh, ww)
        if self.temporal is not None:
            h2 = self.temporal(h2, b, n)

        h3 = self.res3(h2, emb)
        h4 = self.res4(torch.cat([h3, h2], dim=1), emb)

        u = F.interpolate(h4, scale_factor=2, mode="nearest")
        u = self.up_conv1(torch.cat([u, h1], dim=1))
        eps = self.up_conv2(F.silu(u))
        features = h4.reshape(b, n, c2, hh, ww)
        return eps.reshape(b, n, 3, h, w), features

    def spatial_parameters(self):
        prefixes = ("conv_in", "res1", "down", "res2", "res3", "res4",
                    "up_conv1", "up_conv2", "emb_mlp")
        for name, p in self.named_parameters():
            if name.startswith(prefixes):
                yield name, p

    def cross_attention_parameters(self):
        for name, p in self.named_parameters():
            if name.startswith(("cross_norm", "cross_cond_norm", "cross_attn")):
                yield name, p

    def temporal_parameters(self):
        for name, p in self.named_parameters():
            if name.startswith("temporal"):
                yield name, p


class LocalizationHead(nn.Module):
    """Two stacked 3x3 convolutions mapping last-block features to logits."""

    def __init__(self, channels, gen=None):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, 1, 3, padding=1)
        if gen is not None:
            init_conv_(self.conv1, gen)
            init_conv_(self.conv2, gen)

    def forward(self, features):
        b, n, c, h, w = features.shape
        x = features.reshape(b * n, c, h, w)
        logits = self.conv2(F.silu(self.conv1(x)))
        return logits.reshape(b, n, h, w)


def downsample_mask(mask, target_hw):
    """Area-average a binary mask stack (..., H, W) to (..., h, w)."""
    h, w = target_hw
    big_h, big_w = mask.shape[-2], mask.shape[-1]
    if big_h % h != 0 or big_w % w != 0:
        raise ShapeError(f"({big_h}, {big_w}) not divisible by ({h}, {w})")
    fh, fw = big_h // h, big_w // w
    m = torch.as_tensor(mask)
    m = m.to(torch.float64 if m.dtype == torch.float64 else torch.float32)
    lead = m.shape[:-2]
    m = m.reshape(*lead, h, fh, w, fw)
    return m.mean(dim=(-3, -1))


def training_loss(model, loc_head, z0, anchors, conditions, t, eps, schedule,
                  masks=None, lam=0.1, fr=None):
    """Joint objective (L_total, L_rec, L_LOC).

    L_LOC is computed only when masks and a head are supplied; otherwise it
    is reported as zero and L_total == L_rec.
    """
    z_t = q_sample(z0, t, eps, schedule)
    eps_hat, features = model(z_t, t, conditions, anchors, fr=fr)
    rec = ((eps - eps_hat) ** 2).mean()
    if loc_head is not None and masks is not None:
        logits = loc_head(features)
        target = downsample_mask(masks, logits.shape[-2:]).to(logits.dtype)
        loc = F.binary_cross_entropy_with_logits(logits, target)
    else:
        loc = torch.zeros((), dtype=rec.dtype)
    total = rec + lam * loc
    return total, rec, loc


def ddim_timesteps(timesteps, steps):
    """Uniform descending sub-schedule from T to 1."""
    taus = np.linspace(timesteps, 1, steps)
    taus = sorted({int(round(v)) for v in taus}, reverse=True)
    return taus


def ddim_sample(model, schedule, anchors, conditions, gen, steps=50, eta=0.0,
                n_frames=None, fr=None):
    """DDIM trajectory with per-step anchor replacement; output in [0, 1].

    Deterministic at eta=0 given (parameters, inputs, generator seed).
    """
    b = anchors.shape[0]
    n = n_frames if n_frames is not None else conditions.shape[1]
    h, w = anchors.shape[-2], anchors.shape[-1]
    z = torch.randn(b, n, 3, h, w, generator=gen)
    eps_init = z[:, (0, n - 1)].clone()
    taus = ddim_timesteps(schedule.timesteps, steps)
    model.eval()
    with torch.no_grad():
        for i, t_now in enumerate(taus):
            ab_t = float(schedule.alpha_bar[t_now])
            z[:, 0] = math.sqrt(ab_t) * anchors[:, 0] + math.sqrt(1 - ab_t) * eps_init[:, 0]
            z[:, -1] = math.sqrt(ab_t) * anchors[:, 1] + math.sqrt(1 - ab_t) * eps_init[:, 1]
            t_vec = torch.full((b,), t_now, dtype=torch.long)
            eps_hat, _ = model(z, t_vec, conditions, anchors, fr=fr)
            x0 = (z - math.sqrt(1 - ab_t) * eps_hat) / math.sqrt(ab_t)
            x0 = x0.clamp(0.0, 1.0)
            ab_next = float(schedule.alpha_bar[taus[i + 1]]) if i + 1 < len(taus) else 1.0
            if eta > 0 and i + 1 < len(taus):
                sigma = eta * math.sqrt((1 - ab_next) / (1 - ab_t)) * math.sqrt(
                    max(1 - ab_t / ab_next, 0.0)
                )
            else:
                sigma = 0.0
            direction = math.sqrt(max(1 - ab_next - sigma ** 2, 0.0)) * eps_hat
            z = math.sqrt(ab_next) * x0 + direction
            if sigma > 0:
                z = z + sigma * torch.randn(z.shape, generator=gen)
    return z.clamp(0.0, 1.0)

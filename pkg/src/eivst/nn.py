"""Deterministic neural building blocks shared by every learned module.

Everything here is initialized from an explicit torch.Generator and runs in
whatever precision the parameters are cast to, so the same classes serve
float32 training and float64 oracle and gradient tests.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .rng import init_linear_, normal_, uniform_


class LoraLinear(nn.Module):
    """Linear layer with a frozen base weight and a trainable low-rank delta.

    The effective map is base + (alpha / rank) * B @ A.  A is drawn from a
    zero-mean Gaussian with std 0.02 and B starts at zero, so a fresh layer
    computes exactly the base map.
    """

    def __init__(self, d_in, d_out, rank=8, alpha=16.0, gen=None, base_weight=None, bias=True):
        super().__init__()
        if rank < 1:
            raise ConfigError(f"lora rank must be positive, got {rank}")
        self.d_in = d_in
        self.d_out = d_out
        self.rank = rank
        self.alpha = float(alpha)
        self.base = nn.Linear(d_in, d_out, bias=bias)
        if base_weight is not None:
            with torch.no_grad():
                self.base.weight.copy_(base_weight)
                if bias:
                    self.base.bias.zero_()
        elif gen is not None:
            init_linear_(self.base, gen)
        self.base.weight.requires_grad_(False)
        if bias:
            self.base.bias.requires_grad_(False)
        self.lora_A = nn.Parameter(torch.empty(rank, d_in))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank))
        if gen is not None:
            normal_(self.lora_A, 0.02, gen)
        else:
            with torch.no_grad():
                self.lora_A.normal_(0.0, 0.02)

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"expected last dim {self.d_in}, got {x.shape[-1]}")
        delta = (x @ self.lora_A.t()) @ self.lora_B.t()
        return self.base(x) + (self.alpha / self.rank) * delta


class AttentionBlock(nn.Module):
    """Multi-head scaled dot-product attention with plain linear projections.

    No normalization lives inside the block; residual wrappers add their own.
    Self-attention when kv_in is omitted.
    """

    def __init__(self, dim, n_heads, kv_dim=None, gen=None):
        super().__init__()
        if dim % n_heads != 0:
            raise ConfigError(f"n_heads={n_heads} does not divide dim={dim}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.dim = dim
        self.kv_dim = kv_dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        if gen is not None:
            for layer in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
                init_linear_(layer, gen)

    def _projected(self, q_in, kv_in):
        if q_in.shape[-1] != self.dim:
            raise ShapeError(f"query dim {q_in.shape[-1]} != {self.dim}")
        if kv_in.shape[-1] != self.kv_dim:
            raise ShapeError(f"key/value dim {kv_in.shape[-1]} != {self.kv_dim}")
        lead = q_in.shape[:-2]
        lq, lk = q_in.shape[-2], kv_in.shape[-2]
        q = self.q_proj(q_in).reshape(-1, lq, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(kv_in).reshape(-1, lk, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(kv_in).reshape(-1, lk, self.n_heads, self.head_dim).transpose(1, 2)
        return q, k, v, lead, lq

    def forward(self, q_in, kv_in=None):
        kv_in = q_in if kv_in is None else kv_in
        q, k, v, lead, lq = self._projected(q_in, kv_in)
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(*lead, lq, self.dim)
        return self.out_proj(out)

    def attention_weights(self, q_in, kv_in=None):
        """Return softmax attention weights, shape (batch, heads, Lq, Lk)."""
        kv_in = q_in if kv_in is None else kv_in
        q, k, v, _, _ = self._projected(q_in, kv_in)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        return torch.softmax(scores, dim=-1)


class FeedForward(nn.Module):
    def __init__(self, dim, hidden=None, gen=None):
        super().__init__()
        hidden = 4 * dim if hidden is None else hidden
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.act = nn.GELU()
        if gen is not None:
            init_linear_(self.fc1, gen)
            init_linear_(self.fc2, gen)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm residual block: attention then feed-forward.

    With kv_dim set the attention is cross-attention over a separately
    normalized key/value stream.
    """

    def __init__(self, dim, n_heads, kv_dim=None, ffn_hidden=None, gen=None):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(kv_dim) if kv_dim is not None else None
        self.attn = AttentionBlock(dim, n_heads, kv_dim=kv_dim, gen=gen)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden=ffn_hidden, gen=gen)

    def forward(self, x, kv=None):
        if self.norm_kv is not None:
            if kv is None:
                raise ShapeError("cross-attention block requires a kv input")
            x = x + self.attn(self.norm_q(x), self.norm_kv(kv))
        else:
            x = x + self.attn(self.norm_q(x))
        return x + self.ffn(self.norm_ffn(x))


class Adapter(nn.Module):
    """Bottleneck residual adapter: x + W2(act(W1(x))).

    The output projection starts at zero so a fresh adapter is the identity.
    Width defaults to half the model dim.
    """

    def __init__(self, dim, width=None, gen=None):
        super().__init__()
        width = max(1, dim // 2) if width is None else width
        self.down = nn.Linear(dim, width)
        self.up = nn.Linear(width, dim)
        self.act = nn.SiLU()
        if gen is not None:
            init_linear_(self.down, gen)
        with torch.no_grad():
            self.up.weight.zero_()
            self.up.bias.zero_()

    def forward(self, x):
        return x + self.up(self.act(self.down(x)))


def sinusoidal_embedding(values, dim, max_period=10000.0):
    """Standard sinusoidal embedding of scalar values, shape (..., dim)."""
    if dim % 2 != 0:
        raise ConfigError(f"sinusoidal embedding dim must be even, got {dim}")
    values = torch.as_tensor(values)
    if not values.dtype.is_floating_point:
        values = values.double()
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=values.dtype) / half
    )
    args = values.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)

"""Seed derivation and deterministic initialization helpers.

All randomness in the package flows through generators created here.  A run
has one master seed; every consumer derives its own stream from (seed, labels)
so that adding or reordering consumers never perturbs unrelated streams, and
stateless per-step derivation makes resumed runs bit-identical.
"""

import hashlib
import os

import numpy as np
import torch


def derive_seed(seed, *labels):
    """Derive a child seed from a master seed and a label path."""
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFFFFFFFFFFFFFF


def np_rng(seed, *labels):
    return np.random.default_rng(derive_seed(seed, *labels))


def torch_gen(seed, *labels):
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *labels))
    return gen


def uniform_(tensor, bound, gen):
    """In-place uniform init on [-bound, bound] from an explicit generator."""
    with torch.no_grad():
        tensor.copy_(
            (torch.rand(tensor.shape, generator=gen, dtype=tensor.dtype) * 2 - 1) * bound
        )
    return tensor


def normal_(tensor, std, gen):
    with torch.no_grad():
        tensor.copy_(torch.randn(tensor.shape, generator=gen, dtype=tensor.dtype) * std)
    return tensor


def init_linear_(layer, gen):
    """Default fan-in uniform init for a Linear layer, generator-driven."""
    fan_in = layer.weight.shape[1]
    bound = 1.0 / (fan_in ** 0.5)
    uniform_(layer.weight, bound, gen)
    if layer.bias is not None:
        uniform_(layer.bias, bound, gen)
    return layer


def init_conv_(layer, gen):
    """Fan-in uniform init for a Conv2d layer, generator-driven."""
    fan_in = layer.weight.shape[1] * layer.weight.shape[2] * layer.weight.shape[3]
    bound = 1.0 / (fan_in ** 0.5)
    uniform_(layer.weight, bound, gen)
    if layer.bias is not None:
        uniform_(layer.bias, bound, gen)
    return layer


def apply_thread_limit():
    """Cap torch intra-op threads from the EIVST_THREADS environment variable."""
    raw = os.environ.get("EIVST_THREADS", "")
    if raw.strip():
        try:
            n = max(1, int(raw))
        except ValueError:
            return
        torch.set_num_threads(min(n, os.cpu_count() or 1))

"""Finite-difference gradient checking for parameterized operations.

The check recomputes a scalar loss under elementwise central perturbations
h = eps * max(1, |theta|) and compares against autograd.  Run it in float64;
float32 round-off swamps the 1e-4 tolerance this is meant to certify.
"""

import torch

from .errors import GradCheckError
from .rng import np_rng


def grad_check(loss_fn, named_params, eps=1e-6, tol=1e-4, max_elements_per_param=None, seed=0):
    """Compare analytic gradients of loss_fn against central finite differences.

    Args:
        loss_fn: nullary callable returning a scalar tensor built from the
            given parameters.  Must be deterministic.
        named_params: iterable of (name, tensor) pairs; tensors are float64
            leaves with requires_grad=True.
        eps: base perturbation, scaled per element by max(1, |theta|).
        tol: relative-error threshold for the pass verdict.
        max_elements_per_param: if set, check at most this many elements per
            parameter tensor (a seeded deterministic sample); the analytic
            gradient is still computed for every element.
        seed: seed for the element sample.

    Returns:
        dict with max_rel_err, pass, and per-parameter worst errors.

    Raises:
        GradCheckError: if any analytic gradient is non-finite.
    """
    named_params = list(named_params)
    params = [p for _, p in named_params]
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = []
    for name, p in named_params:
        if p.grad is None:
            analytic.append(torch.zeros_like(p))
            continue
        if not torch.isfinite(p.grad).all():
            raise GradCheckError(name)
        analytic.append(p.grad.detach().clone())

    rng = np_rng(seed, "grad-check")
    max_rel_err = 0.0
    per_param = {}
    for (name, p), grad in zip(named_params, analytic):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.numel()
        if max_elements_per_param is not None and n > max_elements_per_param:
            idx = sorted(rng.choice(n, size=max_elements_per_param, replace=False).tolist())
        else:
            idx = range(n)
        worst = 0.0
        for i in idx:
            orig = flat[i].item()
            h = eps * max(1.0, abs(orig))
            with torch.no_grad():
                flat[i] = orig + h
            lo_hi = loss_fn().item()
            with torch.no_grad():
                flat[i] = orig - h
            lo_lo = loss_fn().item()
            with torch.no_grad():
                flat[i] = orig
            g_fd = (lo_hi - lo_lo) / (2 * h)
            g_an = gflat[i].item()
            rel = abs(g_an - g_fd) / max(abs(g_an), abs(g_fd), 1e-8)
            worst = max(worst, rel)
        per_param[name] = worst
        max_rel_err = max(max_rel_err, worst)

    return {"max_rel_err": max_rel_err, "pass": max_rel_err < tol, "per_param": per_param}


def module_grad_check(module, loss_fn, **kwargs):
    """grad_check over a module's trainable parameters.

    The module should already be in float64.  loss_fn takes the module and
    returns a scalar tensor.
    """
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    return grad_check(lambda: loss_fn(module), named, **kwargs)

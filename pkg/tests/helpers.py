"""Finite-difference gradient checking shared by the gradient tests."""
from __future__ import annotations

import numpy as np
import torch


def fd_check(fn, tensors, n_points=10, h=1e-6, rtol=1e-3, atol=1e-8, seed=0, factors=None):
    """Compare autograd against central differences at random entries.

    ``fn()`` must rebuild the scalar loss from the current values of
    ``tensors`` (leaf float64 tensors with ``requires_grad``). ``factors``
    optionally multiplies the numeric derivative per tensor, e.g. ``-lambda``
    for parameters upstream of a gradient reversal. Returns the worst
    relative error seen.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    grads = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        k = int(rng.integers(len(tensors)))
        t = tensors[k]
        idx = tuple(int(rng.integers(s)) for s in t.shape)
        with torch.no_grad():
            orig = t[idx].item()
            t[idx] = orig + h
            up = fn().item()
            t[idx] = orig - h
            down = fn().item()
            t[idx] = orig
        numeric = (up - down) / (2 * h) * (1.0 if factors is None else factors[k])
        analytic = grads[k][idx].item()
        err = abs(numeric - analytic)
        scale = max(abs(numeric), abs(analytic))
        assert err <= rtol * scale + atol, (k, idx, analytic, numeric)
        worst = max(worst, err / scale if scale > 0 else 0.0)
    return worst

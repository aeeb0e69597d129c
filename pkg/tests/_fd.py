"""Central finite-difference checks along random directions."""
from collections import OrderedDict

import torch


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def random_dirs(params, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params.values()]


def numeric_directional(f, params, dirs, eps):
    """(f(p + eps v) - f(p - eps v)) / 2 eps; ``f`` may itself call autograd."""
    def at(sign):
        return OrderedDict((k, (p.detach() + sign * eps * d).requires_grad_(True))
                           for (k, p), d in zip(params.items(), dirs))
    return (float(f(at(1.0)).detach()) - float(f(at(-1.0)).detach())) / (2 * eps)


def analytic_directional(grads, dirs) -> float:
    return float(sum((g * d).sum() for g, d in zip(grads, dirs)))


def directional_check(f, params, n_dirs=3, eps=1e-7, seed=0):
    """Worst relative error between <grad f, v> and its central difference.

    ``f`` maps an ordered dict of float64 tensors to a scalar tensor. The step
    is small because ReLU units sit close to their kink on random inputs.
    """
    base = OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in params.items())
    grads = torch.autograd.grad(f(base), list(base.values()), allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(base.values(), grads)]
    worst = 0.0
    for i in range(n_dirs):
        dirs = random_dirs(base, seed + i)
        worst = max(worst, rel_err(analytic_directional(grads, dirs), numeric_directional(f, base, dirs, eps)))
    return worst

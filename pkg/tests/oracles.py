"""Independent reference computations shared by the unit and acceptance tests."""

import torch

from volcal.nets import init_params, price_value


def random_params(config, seed, spread=0.5):
    """Initialised net plus a random perturbation so biases and gains are non-trivial."""
    p = init_params(config, seed)
    g = torch.Generator().manual_seed(seed)
    return p.with_flat(p.flat + spread * torch.randn(p.flat.shape, generator=g, dtype=torch.float64) / 4)


def value_at(model, k, t):
    return float(price_value(model, torch.tensor([k], dtype=torch.float64),
                             torch.tensor([t], dtype=torch.float64))[0])


def richardson(f, x, h, order):
    """Central difference of ``f`` at ``x`` (first or second order), Richardson-refined."""
    def central(step):
        if order == 1:
            return (f(x + step) - f(x - step)) / (2 * step)
        return (f(x + step) - 2 * f(x) + f(x - step)) / (step * step)
    return (4 * central(h / 2) - central(h)) / 3


def rel_err(a, b, floor):
    return abs(a - b) / max(abs(b), floor)


def fd_gradient(loss, params, h):
    """Per-parameter central differences of a scalar loss."""
    flat = params.flat.detach().clone()
    out = torch.empty_like(flat)
    for i in range(flat.numel()):
        e = torch.zeros_like(flat)
        e[i] = h
        out[i] = (float(loss(params.with_flat(flat + e))) - float(loss(params.with_flat(flat - e)))) / (2 * h)
    return out


def max_rel_gradient_err(grad, fd):
    floor = 1e-3 * float(fd.abs().max())
    return float(((grad - fd).abs() / torch.clamp(fd.abs(), min=floor)).max())

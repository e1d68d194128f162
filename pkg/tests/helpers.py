"""Shared numerical-verification helpers for the test suite.

Finite-difference checks run in float64 with central differences at
h = 1e-5; relative error uses a small floor so near-zero exact gradients
do not blow up the ratio.
"""

import torch


def randomize_parameters(module, seed, scale=0.5):
    """Overwrite every parameter with seeded Gaussian noise.

    Several layers ship with zero-initialized output projections, which
    would make gradient checks through them vacuous.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            noise = torch.randn(p.shape, generator=gen, dtype=torch.float64)
            p.copy_(noise.to(p.dtype) * scale)


def central_difference_at(fn, x, flat_indices, h=1e-5):
    """Finite-difference gradient of scalar fn(x) at selected flat indices."""
    grads = []
    flat = x.reshape(-1)
    with torch.no_grad():
        for i in flat_indices:
            orig = float(flat[i])
            flat[i] = orig + h
            fp = float(fn(x))
            flat[i] = orig - h
            fm = float(fn(x))
            flat[i] = orig
            grads.append((fp - fm) / (2.0 * h))
    return torch.tensor(grads, dtype=torch.float64)


def max_rel_err(approx, exact, floor=1e-6):
    """max |a - e| / max(max|e|, floor), both tensors."""
    diff = float((approx - exact).abs().max())
    denom = max(float(exact.abs().max()), floor)
    return diff / denom


def check_input_gradient(module, x, seed=0, n_coords=20, h=1e-5, tol=1e-4,
                         readout=None):
    """Compare autograd input gradients with central differences.

    ``readout`` maps the module output to a scalar; defaults to a fixed
    random projection so the gradient is nontrivial in every coordinate.
    """
    gen = torch.Generator().manual_seed(seed + 1)

    def scalar(inp):
        out = module(inp)
        if readout is not None:
            return readout(out)
        flat = out.reshape(-1)
        weights = torch.randn(flat.shape[0], generator=torch.Generator().manual_seed(99),
                              dtype=torch.float64)
        return (flat * weights).sum()

    x = x.detach().clone().requires_grad_(True)
    scalar(x).backward()
    auto = x.grad.reshape(-1)
    idx = torch.randperm(x.numel(), generator=gen)[:n_coords].tolist()
    fd = central_difference_at(scalar, x.detach().clone(), idx, h=h)
    err = max_rel_err(auto[idx], fd)
    assert err < tol, f"input gradient mismatch: rel err {err:.3e} >= {tol}"
    return err

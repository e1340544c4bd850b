"""Directional finite-difference gradient checking shared by the network
tests and the acceptance suite.

Per-coordinate steps of 1e-3 occasionally cross rectifier kinks and blow the
comparison up to a few 1e-3 relative error; random unit directions at a
1e-5 step stay ~1e-7 in double precision, so that is the recipe used.
"""

import numpy as np
import torch


def directional_gradient_errors(loss_fn, nets, n_directions=25, step=1e-5, seed=0):
    """Relative errors between analytic directional derivatives and central
    differences along random unit directions in the joint parameter space."""
    for net in nets:
        net.zero_grad()
    loss_fn().backward()
    params = [p for net in nets for p in net.parameters() if p.grad is not None]
    grad = torch.cat([p.grad.reshape(-1) for p in params]).detach()
    rng = np.random.default_rng(seed)

    def shift(vec, c):
        i = 0
        with torch.no_grad():
            for p in params:
                n = p.numel()
                p.reshape(-1).add_(c * vec[i: i + n])
                i += n

    errors = []
    for _ in range(n_directions):
        v = torch.from_numpy(rng.normal(size=grad.numel()))
        v /= torch.linalg.norm(v)
        shift(v, step)
        hi = float(loss_fn().detach())
        shift(v, -2 * step)
        lo = float(loss_fn().detach())
        shift(v, step)
        fd = (hi - lo) / (2 * step)
        analytic = float(grad @ v)
        errors.append(abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-10))
    return errors

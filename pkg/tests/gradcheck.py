"""Finite-difference gradient checks for engine operators."""

import numpy as np

from pfoa import autodiff as ad

from oracles import central_diff, rel_err


def grad_check(build, arrays, seed=0, h=1e-4):
    """Analytic vs central-difference gradient of ``sum(R * build(*inputs))`` for every input."""
    rng = np.random.default_rng(seed + 1000)
    out_shape = build(*[ad.Tensor(a) for a in arrays]).shape
    R = rng.standard_normal(out_shape)

    def f():
        return float(ad.total(ad.mul(build(*[ad.Tensor(a) for a in arrays]), ad.Tensor(R))).data)

    params = [ad.Parameter(a.copy()) for a in arrays]
    loss = ad.total(ad.mul(build(*params), ad.Tensor(R)))
    ad.backward(loss, params)
    return max(rel_err(p.grad, central_diff(f, a, h)) for p, a in zip(params, arrays))


def distinct(rng, shape, spacing=0.01):
    """Random values with pairwise gaps >= spacing (keeps maxpool/relu away from ties and kinks)."""
    n = int(np.prod(shape))
    v = (rng.permutation(n) - n / 2) * spacing + 0.003
    return v.reshape(shape).astype(np.float64)

"""Central finite-difference verification of the analytic gradients.

This is the independent oracle for all model math: it never looks at the
tape, only at loss values under coordinate perturbations.
"""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


def grad_check(
    loss_fn,
    params: list[Parameter],
    eps: float = 1e-4,
    samples_per_param: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must be a deterministic closure over ``params`` returning a
    scalar Tensor.  Checks every coordinate of small parameters and a random
    subsample of ``samples_per_param`` coordinates of large ones.  Returns the
    max relative error, |analytic - numeric| / max(|analytic|, |numeric|, 1e-3);
    the 1e-3 floor keeps near-zero coordinates from amplifying rounding noise.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        if p.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters, {p.name} is {p.dtype}")

    for p in params:
        p.zero_grad()
    base = loss_fn()
    if not np.isfinite(base.item()):
        raise ValueError("loss is not finite at the evaluation point")
    base.backward()
    analytic = {p.name: p.grad.copy() for p in params}

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= samples_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=samples_per_param, replace=False)
        a_flat = analytic[p.name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = loss_fn().item()
            flat[c] = orig - eps
            down = loss_fn().item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(a_flat[c]), abs(numeric), 1e-3)
            worst = max(worst, abs(a_flat[c] - numeric) / denom)
    return worst

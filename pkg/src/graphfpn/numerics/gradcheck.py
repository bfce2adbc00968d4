"""Central finite-difference verification of taped gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tape, Tensor, zero_grad


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between taped gradients of f() and central differences.

    f must rebuild its forward pass from the live parameter buffers on every
    call, return a scalar, and be smooth at the evaluation point (callers are
    responsible for keeping ReLU preactivations away from 0). Relative error
    per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    Tensors larger than max_coords entries are probed on a seeded random
    coordinate subset.
    """
    zero_grad(params)
    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        analytic = analytic.reshape(-1)
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_coords:
            coords = range(n)
        else:
            coords = sorted(int(c) for c in rng.choice(n, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = f().item()
            flat[c] = orig - h
            f_minus = f().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic[c] - numeric) / max(1.0, abs(analytic[c]), abs(numeric))
            worst = max(worst, err)
    return worst

"""Finite-difference gradient verification.

``gradient_check`` compares reverse-mode gradients against central
differences parameter-by-parameter and reports the worst relative error,
using the usual symmetric denominator so that tiny gradients do not blow the
ratio up.  Loss builders must be pure: every invocation reconstructs the
graph from the current parameter values.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor

__all__ = ["gradient_check"]


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
) -> float:
    """Return the max relative error between analytic and numeric gradients.

    ``loss_fn`` evaluates the scalar loss from scratch; ``params`` are the
    tensors to probe.  Central differences use step ``eps`` in float64.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = float(ana.ravel()[i])
            denom = max(abs(a) + abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst

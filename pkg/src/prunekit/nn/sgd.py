"""SGD with momentum, decoupled-from-nothing weight decay, and global-norm clipping.

Update rule per step (matching the classic heavy-ball form):

    g     <- clip_global_norm(grad)            (optional; applied jointly)
    v     <- momentum * v + (g + weight_decay * w)
    w     <- w - lr * v

Clipping rescales the concatenated gradient vector, so relative magnitudes
across parameters survive; the pre-clip global norm and max entry are
returned for diagnostics.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from ..errors import NumericalError
from .tensor import Parameter

__all__ = ["SGD", "global_grad_norm", "max_abs_grad"]


def global_grad_norm(params: Sequence[Parameter]) -> float:
    """L2 norm of the concatenation of every present gradient."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.dot(p.grad.ravel(), p.grad.ravel()))
    return math.sqrt(total)


def max_abs_grad(params: Sequence[Parameter]) -> float:
    """Largest absolute gradient entry across all parameters."""
    worst = 0.0
    for p in params:
        if p.grad is not None and p.grad.size:
            worst = max(worst, float(np.abs(p.grad).max()))
    return worst


class SGD:
    def __init__(
        self,
        named_params: Sequence[tuple[str, Parameter]],
        lr: float,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
        clip_max_norm: Optional[float] = None,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if clip_max_norm is not None and clip_max_norm <= 0:
            raise ValueError(f"clip_max_norm must be positive, got {clip_max_norm}")
        self.named_params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_max_norm = clip_max_norm
        self.velocities: dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.named_params
        }

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()

    def step(self) -> dict:
        """Apply one update; returns pre-clip gradient diagnostics.

        Raises :class:`NumericalError` naming the offending parameter if any
        gradient is non-finite after clipping.
        """
        params = [p for _, p in self.named_params]
        pre_norm = global_grad_norm(params)
        pre_max = max_abs_grad(params)
        scale = 1.0
        if self.clip_max_norm is not None and pre_norm > self.clip_max_norm:
            scale = self.clip_max_norm / pre_norm
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad if scale == 1.0 else p.grad * scale
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient in parameter {name!r}")
            v = self.velocities[name]
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data -= self.lr * v
        return {"pre_clip_norm": pre_norm, "pre_clip_max": pre_max, "clip_scale": scale}

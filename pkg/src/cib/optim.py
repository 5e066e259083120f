"""Parameter updates: momentum SGD with a linear warmup / linear decay schedule."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import GradientMap, Tensor


class MomentumSGD:
    """Gradient descent with classical momentum over a named parameter dict.

    Updates mutate parameter values in place via ``assign_`` and must happen
    between graph lifetimes, never inside a forward pass.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not (0.0 <= momentum < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = {name: np.zeros(t.shape) for name, t in self.params.items()}

    def step(self, grads: GradientMap, lr: float | None = None) -> None:
        eta = self.lr if lr is None else float(lr)
        for name, p in self.params.items():
            v = self._velocity[name]
            v *= self.momentum
            v += grads.raw(p)
            p.assign_(p.data - eta * v)


class WarmupLinearDecay:
    """Learning-rate schedule: linear ramp to the peak, then linear decay to zero.

    ``lr_at(step)`` is defined for 0-based global steps.  With
    ``warmup_steps == 0`` the schedule degenerates to plain linear decay from
    the peak over all ``total_steps``.
    """

    def __init__(self, peak_lr: float, warmup_steps: int, total_steps: int):
        if peak_lr <= 0:
            raise ValueError(f"peak_lr must be positive, got {peak_lr}")
        if total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {total_steps}")
        if not (0 <= warmup_steps < max(total_steps, 1) or warmup_steps == 0):
            raise ValueError(f"warmup_steps {warmup_steps} incompatible with total_steps {total_steps}")
        self.peak_lr = float(peak_lr)
        self.warmup_steps = int(warmup_steps)
        self.total_steps = int(total_steps)

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError(f"step must be >= 0, got {step}")
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.peak_lr * (step + 1) / self.warmup_steps
        remaining = self.total_steps - step
        span = self.total_steps - self.warmup_steps
        if span <= 0:
            return 0.0
        return self.peak_lr * max(0.0, remaining / span)


def effective_warmup(requested: int, total_steps: int, fraction: float = 0.1) -> int:
    """Scale the warmup down proportionally when a run has few total steps.

    The returned warmup never exceeds ``fraction`` of the run (and never the
    request itself), so short desk-scale runs still spend most of their steps
    past the ramp.
    """
    cap = max(1, int(round(fraction * total_steps)))
    return max(0, min(int(requested), cap))

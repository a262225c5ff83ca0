"""AdamW with decoupled weight decay and a warmup + cosine-decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor


@dataclass
class WarmupCosine:
    """Linear warmup to a peak rate, then cosine decay to a floor.

    With `total_steps` scheduled updates, step t (0-based) during warmup
    gets peak * (t + 1) / warmup_steps; afterwards the rate follows a half
    cosine that lands exactly on `floor` at the final step.
    """

    peak: float
    total_steps: int
    warmup_steps: int = 0
    floor: float = 0.0

    def __call__(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.peak * (step + 1) / self.warmup_steps
        span = max(self.total_steps - 1 - self.warmup_steps, 1)
        progress = min(max(step - self.warmup_steps, 0), span) / span
        return self.floor + 0.5 * (self.peak - self.floor) * (
            1.0 + math.cos(math.pi * progress)
        )


@dataclass
class ConstantRate:
    value: float

    def __call__(self, step: int) -> float:
        return self.value


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list.

    Moments are allocated lazily with the shapes of the parameters; the
    step counter starts at 0 and increases by one per `step` call.
    """

    def __init__(
        self,
        params,
        lr=1e-3,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.schedule = lr if callable(lr) else ConstantRate(float(lr))
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return self.schedule(self.step_count)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads=None) -> float:
        """Apply one update; returns the learning rate that was used."""
        if grads is None:
            grads = [
                p.grad if p.grad is not None else np.zeros_like(p.data)
                for p in self.params
            ]
        if len(grads) != len(self.params):
            raise ShapeError("gradient list does not match parameter list")
        lr = self.schedule(self.step_count)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            if g.shape != p.data.shape:
                raise ShapeError(f"grad shape {g.shape} vs param {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)
        return lr


def clip_by_norm(grads, max_norm: float):
    """Scale the whole gradient list so its global norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm > 0:
        coef = max_norm / total
        return [g * coef for g in grads], total
    return grads, total

"""AdamW and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


def lr_schedule(epoch: float, lr_peak: float, warmup_epochs: int, total_epochs: int) -> float:
    """Linear warmup from 0 to ``lr_peak``, then cosine decay reaching 0 at the last epoch.

    ``epoch`` may be fractional (step-level interpolation).
    """
    if total_epochs < 1 or not 0 <= warmup_epochs < max(total_epochs, 1):
        raise ValueError(f"need 0 <= warmup_epochs < total_epochs, got {warmup_epochs}, {total_epochs}")
    if epoch < warmup_epochs:
        return lr_peak * epoch / warmup_epochs
    span = total_epochs - 1 - warmup_epochs
    progress = 1.0 if span <= 0 else min(1.0, (epoch - warmup_epochs) / span)
    if progress >= 1.0:
        return 0.0
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay.

    Decay applies only to matrices (ndim >= 2); biases and the mask token are
    left alone.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1.5e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.05,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2, lr = self.beta1, self.beta2, self.lr
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)

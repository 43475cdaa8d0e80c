"""AdamW with decoupled weight decay."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01, grad_clip: float | None = 1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                                 for p in self.params if p.grad is not None)))

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        scale = 1.0
        if self.grad_clip is not None:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                scale = self.grad_clip / (norm + 1e-12)
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class EMA:
    """Exponential moving average of parameters; ``copy_to`` writes the averages back."""

    def __init__(self, params: list[Tensor], decay: float = 0.999):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
        self.params = list(params)
        self.decay = decay
        self.shadow = [p.data.astype(np.float64).copy() for p in self.params]
        self.updates = 0

    def update(self) -> None:
        self.updates += 1
        # warm-up: short runs should not be dominated by the initial weights
        d = min(self.decay, (1.0 + self.updates) / (10.0 + self.updates))
        for s, p in zip(self.shadow, self.params):
            s *= d
            s += (1.0 - d) * p.data

    def copy_to(self) -> None:
        for s, p in zip(self.shadow, self.params):
            p.data = s.astype(p.dtype)

    def swap(self) -> None:
        """Exchange live and averaged weights; calling twice restores the original state."""
        for i, p in enumerate(self.params):
            live = p.data.astype(np.float64)
            p.data = self.shadow[i].astype(p.dtype)
            self.shadow[i] = live


def cosine_lr(base: float, step: int, total: int, warmup: int = 0, floor: float = 0.0) -> float:
    """Linear warm-up followed by half-cosine decay from ``base`` to ``floor * base``."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if total <= warmup:
        return base
    frac = min(1.0, (step - warmup) / max(1, total - warmup))
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))

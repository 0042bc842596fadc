"""Adam with a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class CosineSchedule:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_ratio * base_lr`` at the last step."""

    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_ratio: float = 1e-4

    def __call__(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        span = max(self.total_steps - 1 - self.warmup_steps, 1)
        progress = min(max(step - self.warmup_steps, 0) / span, 1.0)
        low = self.base_lr * self.min_ratio
        return low + (self.base_lr - low) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    def __init__(self, named_params, schedule: CosineSchedule, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = dict(named_params)
        self.schedule = schedule
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state = OptimState(
            m={k: np.zeros_like(p.data) for k, p in self.params.items()},
            v={k: np.zeros_like(p.data) for k, p in self.params.items()},
        )

    @property
    def lr(self) -> float:
        return self.schedule(self.state.step)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        """Apply one update with the scheduled learning rate; returns that rate."""
        lr = self.lr
        st = self.state
        t = st.step + 1
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = st.m[name]
            v = st.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        st.step = t
        return lr

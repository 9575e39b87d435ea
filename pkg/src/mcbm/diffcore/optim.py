"""SGD-with-momentum and Adam (L2-style weight decay), plus a step LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .nn import Parameter

OPTIMIZERS = ("sgd", "adam")


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    moments: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def step(self, params: Iterable[Parameter]) -> None:
        self.step_count += 1
        for p in params:
            if p.grad is None:
                continue
            if p.name is None:
                raise ValueError("optimizer parameters must be named")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self.moments.setdefault(p.name, {})
            if self.kind == "sgd":
                if self.momentum:
                    m = buf.get("momentum")
                    m = g.copy() if m is None else self.momentum * m + g
                    buf["momentum"] = m
                    g = m
                p.data = p.data - self.learning_rate * g
            else:
                m = buf.get("m", np.zeros_like(p.data))
                v = buf.get("v", np.zeros_like(p.data))
                m = self.adam_beta1 * m + (1 - self.adam_beta1) * g
                v = self.adam_beta2 * v + (1 - self.adam_beta2) * g * g
                buf["m"], buf["v"] = m, v
                t = self.step_count
                m_hat = m / (1 - self.adam_beta1**t)
                v_hat = v / (1 - self.adam_beta2**t)
                p.data = p.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.adam_eps)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


@dataclass(frozen=True)
class StepScheduler:
    step_size_epochs: int = 20
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.step_size_epochs < 1:
            raise ValueError("step_size_epochs must be >= 1")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")

    def lr(self, base_lr: float, epoch: int) -> float:
        return base_lr * self.decay_factor ** math.floor(epoch / self.step_size_epochs)

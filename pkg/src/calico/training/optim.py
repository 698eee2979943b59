"""AdamW with linear warmup, linear decay and global-norm clipping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from calico.errors import StepError
from calico.numerics.layers import Parameter


@dataclass
class OptimizerState:
    base_lr: float = 4e-4
    warmup_steps: int = 100
    total_steps: int = 5000
    betas: tuple[float, float] = (0.9, 0.95)
    grad_clip: float = 1.0
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    last_grad_norm: float = 0.0

    def lr_at(self, step: int) -> float:
        """base * step / warmup while warming up, then linear to 0 at total_steps."""
        if step <= self.warmup_steps:
            return self.base_lr * step / self.warmup_steps if self.warmup_steps else self.base_lr
        if step >= self.total_steps:
            return 0.0
        return self.base_lr * (self.total_steps - step) / (self.total_steps - self.warmup_steps)


def optimizer_step(params: Sequence[Parameter], state: OptimizerState) -> float:
    """Update every trainable parameter from its accumulated ``grad``; returns the lr used.

    A non-finite gradient raises StepError before anything changes.
    """
    params = [p for p in params if p.trainable]
    grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
    for p, g in zip(params, grads):
        if not np.isfinite(g).all():
            raise StepError(f"non-finite gradient for {p.name}; step {state.step + 1} skipped")
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    state.last_grad_norm = norm
    scale = state.grad_clip / norm if state.grad_clip and norm > state.grad_clip else 1.0
    state.step += 1
    t = state.step
    lr = state.lr_at(t)
    b1, b2 = state.betas
    for p, g in zip(params, grads):
        g = g * scale
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        data = p.tensor.data
        if state.weight_decay:
            data *= 1.0 - lr * state.weight_decay
        data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return lr

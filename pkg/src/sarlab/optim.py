"""AdamW with decoupled weight decay and a linear warm-up / linear decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


class NumericalError(RuntimeError):
    """Non-finite loss or gradient encountered during training."""


@dataclass
class LinearSchedule:
    """Linear ramp from 0 to ``peak_lr`` then linear decay to 0 at ``total_steps``."""

    peak_lr: float
    total_steps: int
    warmup_fraction: float = 0.05

    @property
    def warmup_steps(self) -> float:
        return self.warmup_fraction * self.total_steps

    def lr_at(self, step: int) -> float:
        total = self.total_steps
        step = min(max(step, 0), total)
        w = self.warmup_steps
        if w > 0 and step <= w:
            return self.peak_lr * step / w
        if total <= w:
            return self.peak_lr
        return self.peak_lr * (total - step) / (total - w)


@dataclass
class OptimizerState:
    params: dict[str, Tensor]
    schedule: LinearSchedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    weight_decay: float = 0.01
    max_grad_norm: float | None = 1.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def global_grad_norm(params: dict[str, Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values()
                             if p.grad is not None)))


def adamw_step(state: OptimizerState) -> float:
    """One AdamW update on ``state.params`` using their ``.grad``; returns the lr used."""
    for name, p in state.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")

    clip = 1.0
    if state.max_grad_norm is not None:
        norm = global_grad_norm(state.params)
        if norm > state.max_grad_norm:
            clip = state.max_grad_norm / norm

    state.t += 1
    lr = state.schedule.lr_at(state.t)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in state.params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad * clip
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr

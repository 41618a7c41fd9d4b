"""Decoupled-weight-decay Adam and the warmup + cosine LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .objective import DivergenceError
from .tensor import DimensionError, ParamSet


@dataclass
class LrSchedule:
    peak: float = 5e-4
    minimum: float = 1e-6
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.minimum <= self.peak:
            raise ValueError(f"need 0 <= minimum <= peak, got {self.minimum}, {self.peak}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


def lr_at(sched: LrSchedule, step: int) -> float:
    """Linear 0 -> peak over warmup, then cosine peak -> minimum; holds the
    minimum past total_steps."""
    if step < 0:
        raise ValueError("negative step")
    if step < sched.warmup_steps:
        return sched.peak * step / sched.warmup_steps
    if step >= sched.total_steps:
        return sched.minimum
    progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.minimum + 0.5 * (sched.peak - sched.minimum) * (1.0 + np.cos(np.pi * progress))


@dataclass
class OptState:
    """First/second moments per parameter plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05

    @classmethod
    def for_params(cls, params: ParamSet, **kwargs) -> "OptState":
        state = cls(**kwargs)
        for name, tensor in params.items():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state


def adamw_step(params: ParamSet, grads: ParamSet, opt: OptState, lr: float):
    """Bias-corrected Adam update with decoupled decay (decay applied first,
    then the moment step). Mutates params and opt in place."""
    if params.names() != grads.names():
        raise DimensionError("parameter and gradient names differ")
    for name, g in grads.items():
        if not np.all(np.isfinite(g.data)):
            raise DivergenceError(f"non-finite gradient for {name}")
    opt.t += 1
    bc1 = 1.0 - opt.beta1**opt.t
    bc2 = 1.0 - opt.beta2**opt.t
    for name, p in params.items():
        g = grads[name].data
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        if opt.weight_decay:
            p.data *= 1.0 - lr * opt.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)

"""Adam and a step-decay learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from raregen.errors import ContractError


@dataclass(frozen=True)
class AdamState:
    """Moment estimates for one parameter set.  ``step`` counts completed updates."""

    m: tuple = ()
    v: tuple = ()
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kwargs) -> "AdamState":
        return cls(
            m=tuple(np.zeros_like(p, dtype=np.float64) for p in params),
            v=tuple(np.zeros_like(p, dtype=np.float64) for p in params),
            **kwargs,
        )


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update.

    Returns ``(new_params, new_state)``; the inputs are left untouched.
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state = AdamState.zeros_like(params, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    for i, (p, g, m) in enumerate(zip(params, grads, state.m)):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractError(f"shape mismatch at parameter {i}: {p.shape} vs grad {g.shape}")

    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_params.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, m=tuple(new_m), v=tuple(new_v), step=t)


@dataclass(frozen=True)
class StepLR:
    base_lr: float
    step_size: int
    gamma: float = 0.1

    def __post_init__(self):
        if self.base_lr <= 0 or self.step_size <= 0 or not 0 < self.gamma <= 1:
            raise ContractError(f"invalid schedule {self}")

    def __call__(self, epoch: int) -> float:
        return steplr(self, epoch)


def steplr(schedule: StepLR, epoch: int) -> float:
    """``base_lr * gamma ** (epoch // step_size)``."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return schedule.base_lr * schedule.gamma ** (epoch // schedule.step_size)

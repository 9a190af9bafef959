"""SGD with momentum under a cosine-annealing warm-restart schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mmfusion.errors import ConfigError, ContractError
from mmfusion.tensor import Tensor


def cosine_annealing(t: float, period: float, lr_max: float, lr_min: float) -> float:
    """Learning rate ``t`` steps into a cosine period of length ``period``."""
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / period))


@dataclass
class OptimizerState:
    learning_rate_max: float = 0.002
    learning_rate_min: float = 0.0
    restart_period: int = 1
    period_multiplier: float = 2.0
    momentum: float = 0.9
    step_counter: int = 0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.restart_period <= 0:
            raise ConfigError("restart_period must be positive")
        if self.period_multiplier < 1:
            raise ConfigError("period_multiplier must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.learning_rate_min > self.learning_rate_max:
            raise ConfigError("learning_rate_min exceeds learning_rate_max")


def restart_phase(step: int, period: float, multiplier: float) -> tuple[float, float]:
    """Map a global step to ``(steps since last restart, current period)``."""
    if period <= 0:
        raise ConfigError("restart period must be positive")
    if step < 0:
        raise ContractError("step counter must be nonnegative")
    t = float(step)
    T = float(period)
    if multiplier == 1.0:
        return t % T, T
    while t >= T:
        t -= T
        T *= multiplier
    return t, T


def cosine_lr(state: OptimizerState) -> float:
    t, T = restart_phase(state.step_counter, state.restart_period, state.period_multiplier)
    lr = cosine_annealing(t, T, state.learning_rate_max, state.learning_rate_min)
    return min(max(lr, state.learning_rate_min), state.learning_rate_max)


def clip_grad_norm(grads: dict[Tensor, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def sgd_step(params: list[Tensor], grads: dict[Tensor, np.ndarray], state: OptimizerState) -> list[Tensor]:
    """One momentum-SGD update at the scheduled rate; advances the step counter.

    Parameters absent from ``grads`` are treated as having zero gradient.
    """
    lr = cosine_lr(state)
    mom = state.momentum
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.value)
        elif g.shape != p.shape:
            raise ContractError(f"grad shape {g.shape} does not match parameter {p.name} {p.shape}")
        v = state.velocity.get(p)
        v = g.copy() if v is None else mom * v + g
        state.velocity[p] = v
        if lr != 0.0:
            p.value = p.value - np.asarray(lr, dtype=p.dtype) * v
    state.step_counter += 1
    return params

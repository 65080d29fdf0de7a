from dataclasses import dataclass
from math import cos, pi, sqrt
from typing import Dict, Mapping, Tuple

import numpy as np

from core.errors import ConfigError, NonFiniteError


@dataclass
class ScheduleParameters:
    """Parameters of the warmup + cosine learning-rate schedule."""
    base_lr: float = 2.5e-4
    warmup_steps: int = 100
    total_steps: int = 3000
    min_mult: float = 0.1  # Final LR as a fraction of base_lr


def cosine_lr(step: int, total_steps: int, warmup_steps: int,
              base_lr: float, min_mult: float = 0.1) -> float:
    """
    Linear warmup to base_lr, then cosine decay to min_mult * base_lr.

    Args:
        step: Current step in [0, total_steps]
        total_steps: Step at which the decay reaches its floor
        warmup_steps: Length of the linear warmup
        base_lr: Peak learning rate
        min_mult: Floor as a fraction of base_lr

    Returns:
        Learning rate for this step
    """
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    decay_steps = total_steps - warmup_steps
    if decay_steps <= 0:
        return base_lr
    progress = min(max((step - warmup_steps) / decay_steps, 0.0), 1.0)
    return base_lr * (min_mult + (1.0 - min_mult) * 0.5 * (1.0 + cos(pi * progress)))


class LearningRateSchedule:
    """Warmup + cosine schedule bound to one run's parameters."""

    def __init__(self, params: ScheduleParameters = None):
        self.params = params or ScheduleParameters()

    def lr_at(self, step: int) -> float:
        p = self.params
        return cosine_lr(step, p.total_steps, p.warmup_steps, p.base_lr, p.min_mult)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())
    return sqrt(total)


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """
    Scale all gradients by max_norm / norm when the global L2 norm exceeds max_norm.

    Returns:
        (possibly scaled gradients, pre-clip global norm)

    Raises:
        NonFiniteError: naming the first parameter whose gradient holds NaN/Inf
    """
    if max_norm <= 0:
        raise ConfigError(f"clip threshold must be positive, got {max_norm}")
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient in parameter '{name}'")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    scale = np.float32(max_norm / norm)
    return {name: g * scale for name, g in grads.items()}, norm

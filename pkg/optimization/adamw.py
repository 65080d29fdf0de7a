from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from core.errors import DimensionError, NonFiniteError
from core.tensor import Tensor


@dataclass
class OptimizerState:
    """Per-parameter AdamW moment buffers and the shared step counter."""
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class AdamWParameters:
    """Hyperparameters of the decoupled-weight-decay Adam update."""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
               state: OptimizerState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.01) -> OptimizerState:
    """
    One AdamW update with bias correction, applied in place to params.

    A parameter without a gradient entry is updated with a zero gradient
    (its moments still decay and weight decay still applies).

    Raises:
        NonFiniteError: if any gradient holds NaN/Inf; nothing is updated.
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient in parameter '{name}'")

    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        elif grad.shape != param.shape:
            raise DimensionError(f"gradient for '{name}' has shape {grad.shape}, parameter {param.shape}")

        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v

        if weight_decay:
            param.data *= (1.0 - lr * weight_decay)
        param.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return state


class AdamW:
    """
    Stateful wrapper over adamw_step for a named parameter set.
    """

    def __init__(self, params: Mapping[str, Tensor], hyper: Optional[AdamWParameters] = None):
        self.params = params
        self.hyper = hyper or AdamWParameters()
        self.state = OptimizerState()

    def step(self, lr: float, grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
        if grads is None:
            grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state, lr,
                   beta1=self.hyper.beta1, beta2=self.hyper.beta2,
                   eps=self.hyper.eps, weight_decay=self.hyper.weight_decay)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

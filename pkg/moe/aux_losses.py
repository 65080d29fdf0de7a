from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from core.tensor import Tensor


@dataclass
class AuxLossReport:
    """Auxiliary-loss values and the load statistics behind them (one layer)."""
    balance_loss: float
    z_loss: float
    per_expert_load: List[float]  # f_i, fraction of token-slots
    per_expert_mean_prob: List[float]  # P_i, mean pre-mask softmax probability


@dataclass
class AuxLoss:
    """Differentiable auxiliary losses summed over MoE layers."""
    balance: Tensor = field(default_factory=lambda: Tensor(0.0))
    z: Tensor = field(default_factory=lambda: Tensor(0.0))
    reports: List[AuxLossReport] = field(default_factory=list)

    def add(self, balance: Tensor, z: Tensor, report: AuxLossReport) -> None:
        self.balance = self.balance + balance
        self.z = self.z + z
        self.reports.append(report)

    @property
    def balance_value(self) -> float:
        return float(self.balance.data)

    @property
    def z_value(self) -> float:
        return float(self.z.data)


def expert_load(ids: np.ndarray, n_experts: int) -> np.ndarray:
    """f_i: fraction of the T*K token-slots that went to expert i."""
    counts = np.bincount(np.asarray(ids).reshape(-1), minlength=n_experts).astype(np.float64)
    return counts / max(ids.size, 1)


def balance_loss(full_logits: Tensor, ids: np.ndarray, alpha: float
                 ) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """
    Switch-style load-balancing loss alpha * N * sum_i f_i * P_i.

    P_i always uses the softmax of the pre-mask logits, also for sigmoid
    routers, where it serves only as the load signal.

    Returns:
        (loss, f, P)
    """
    n_experts = full_logits.shape[-1]
    load = expert_load(ids, n_experts)
    probs = full_logits.softmax(axis=-1).mean(axis=0)
    mean_prob = probs.data.astype(np.float64)
    if alpha == 0:
        return Tensor(0.0), load, mean_prob
    loss = (probs * load.astype(np.float32)).sum() * (alpha * n_experts)
    return loss, load, mean_prob


def z_loss(full_logits: Tensor, coef: float) -> Tensor:
    """Router z-loss: coef * mean_t logsumexp(logits_t)^2."""
    if coef == 0:
        return Tensor(0.0)
    lse = full_logits.logsumexp(axis=-1)
    return (lse * lse).mean() * coef


def layer_aux_losses(full_logits: Tensor, ids: np.ndarray, alpha: float, coef: float
                     ) -> Tuple[Tensor, Tensor, AuxLossReport]:
    balance, load, mean_prob = balance_loss(full_logits, ids, alpha)
    z = z_loss(full_logits, coef)
    report = AuxLossReport(balance_loss=float(balance.data), z_loss=float(z.data),
                           per_expert_load=load.tolist(), per_expert_mean_prob=mean_prob.tolist())
    return balance, z, report

from dataclasses import dataclass
from typing import List, Mapping, Optional, Tuple

import numpy as np

from core.errors import NonFiniteError
from core.tensor import Tensor
from core.types import ExpertType
from .aux_losses import AuxLossReport, layer_aux_losses
from .config import MoEConfig
from .routing import LayerRouting, RoutingOverrides, route


@dataclass
class ExpertCounters:
    """Counts of expert FFN evaluations, for checking the sparsity contract."""
    tokens: int = 0
    ffn_evaluations: int = 0  # (token, routed FFN slot) pairs actually computed
    shared_evaluations: int = 0

    def reset(self) -> None:
        self.tokens = self.ffn_evaluations = self.shared_evaluations = 0


@dataclass
class MoEOutput:
    y: Tensor
    routing: LayerRouting
    balance: Tensor
    z: Tensor
    aux: AuxLossReport


def expert_ffn(x: Tensor, w_in: Tensor, w_out: Tensor) -> Tensor:
    """Two-matrix expert: GELU(x W_in) W_out."""
    return (x @ w_in).gelu() @ w_out


def _check_finite(out: Tensor, layer: int, expert: str) -> None:
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite expert output at layer {layer}, expert {expert}")


def moe_forward(x: Tensor, config: MoEConfig, params: Mapping[str, Tensor], layer: int = 0,
                overrides: Optional[RoutingOverrides] = None,
                counters: Optional[ExpertCounters] = None,
                token_offset: int = 0) -> MoEOutput:
    """
    Sparse MoE layer: y = sum_{i in topK} gate_i * E_i(x) + sum_s S_s(x).

    Only the selected experts are evaluated, each on the rows routed to it.
    Zero slots contribute nothing, copy slots return x, negated slots -E_b(x).
    Shared experts are added un-gated.

    Args:
        x: T x d token representations
        config: Layer configuration
        params: Layer-scoped parameters ('router.*', 'experts.{i}.w_in', 'shared.{s}.w_in', ...)
        layer: Layer id for records and error messages
        overrides: Evaluation-time routing overrides
        counters: Optional evaluation counters
        token_offset: Position of the first row in the caller's token stream

    Returns:
        MoEOutput with the layer output, routing records and auxiliary losses
    """
    n_tokens, width = x.shape
    router = route(x, config, params, overrides)
    pool = config.expert_pool()

    parts: List[Tuple[np.ndarray, Tensor]] = []
    for slot, kind in enumerate(pool):
        rows, cols = np.nonzero(router.ids == slot)
        if rows.size == 0 or kind.kind == ExpertType.ZERO:
            continue
        gate = router.gates.gather(rows, cols).reshape(-1, 1)
        selected = x.take_rows(rows)
        if kind.kind == ExpertType.COPY:
            out = selected * gate
        else:
            expert = f"experts.{kind.base_id}"
            out = expert_ffn(selected, params[f"{expert}.w_in"], params[f"{expert}.w_out"])
            if kind.kind == ExpertType.NEGATED:
                out = -out
            if counters is not None:
                counters.ffn_evaluations += int(rows.size)
            out = out * gate
        _check_finite(out, layer, kind.label())
        parts.append((rows, out))

    y = Tensor.scatter_rows((n_tokens, width), parts)
    for s in range(config.n_shared):
        shared = expert_ffn(x, params[f"shared.{s}.w_in"], params[f"shared.{s}.w_out"])
        _check_finite(shared, layer, f"shared.{s}")
        y = y + shared
        if counters is not None:
            counters.shared_evaluations += n_tokens
    if counters is not None:
        counters.tokens += n_tokens

    balance, z, report = layer_aux_losses(router.logits, router.ids, config.balance_coef, config.z_coef)
    routing = LayerRouting.from_router(layer, router, offset=token_offset)
    return MoEOutput(y=y, routing=routing, balance=balance, z=z, aux=report)


def dense_forward(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Plain FFN sublayer ('ffn.w_in', 'ffn.w_out')."""
    return expert_ffn(x, params["ffn.w_in"], params["ffn.w_out"])

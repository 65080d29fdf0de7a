from typing import Dict, Mapping, Optional, TypeVar

from .config import ModelConfig, ParamCount

V = TypeVar("V")


def scoped(params: Mapping[str, V], prefix: str) -> Dict[str, V]:
    """View of the parameters under `prefix`, with the prefix stripped."""
    if not prefix.endswith("."):
        prefix += "."
    return {name[len(prefix):]: value for name, value in params.items() if name.startswith(prefix)}


def layer_prefix(layer: int) -> str:
    return f"layers.{layer}."


def moe_prefix(layer: int) -> str:
    return layer_prefix(layer) + "moe."


def _size(value) -> int:
    return int(value.size)


def count_params(params: Mapping[str, object], config: Optional[ModelConfig] = None) -> ParamCount:
    """
    Total and per-token active parameters.

    Active counts every non-expert weight, routers, shared experts and
    min(K, N_E) routed FFN experts per MoE layer; zero/copy/negated slots
    own no parameters.
    """
    total = sum(_size(v) for v in params.values())
    if config is None or not config.moe_layers:
        return ParamCount(total=total, active=total)

    routed_total = 0
    routed_active = 0
    moe = config.moe
    for layer in config.moe_layers:
        layer_params = scoped(params, moe_prefix(layer))
        per_expert = [sum(_size(v) for k, v in layer_params.items() if k.startswith(f"experts.{i}."))
                      for i in range(moe.n_experts)]
        routed_total += sum(per_expert)
        # Experts are the same size, so any min(K, N_E) of them give the active count
        routed_active += sum(sorted(per_expert)[:min(moe.top_k, moe.n_experts)])
    return ParamCount(total=total, active=total - routed_total + routed_active,
                      routed_expert_total=routed_total, routed_expert_active=routed_active)

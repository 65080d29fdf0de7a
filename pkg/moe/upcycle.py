from typing import Dict, List, Mapping
import logging

import numpy as np

from core.errors import ConfigError, ManifestError
from core.rng import Rng
from core.tensor import Tensor, parameter
from core.types import UpcycleMode, Variant

logger = logging.getLogger(__name__)


def _array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float32)


def upcycle(dense_params: Mapping[str, object], config, mode: UpcycleMode, rng: Rng) -> Dict[str, Tensor]:
    """
    Build MoE parameters from a trained dense model (sparse upcycling).

    full: every routed and shared expert copies the dense FFN of its layer.
    shared_only: shared experts copy the dense FFN, routed experts keep a
    fresh initialization. Routers are always freshly drawn from
    N(0, router_init_std); attention, embeddings, norms and head are copied.

    Args:
        dense_params: Arrays (or tensors) of a dense-variant model
        config: ModelConfig of the target MoE model
        mode: UpcycleMode.FULL or UpcycleMode.SHARED_ONLY
        rng: Stream for the fresh router/expert initialization

    Raises:
        ConfigError: dense FFN width differs from expert_dim, or shared_only
            without shared experts
        ManifestError: dense arrays missing or shaped differently
    """
    # Local import keeps moe importable without the model package
    from model.transformer import build_model
    from model.params import layer_prefix, moe_prefix

    mode = UpcycleMode(mode)
    moe = config.moe
    if moe.is_dense:
        raise ConfigError("upcycling needs a MoE variant, got dense")
    if mode == UpcycleMode.SHARED_ONLY and not moe.variant.has_shared:
        raise ConfigError(f"shared_only upcycling needs a shared-expert variant, got {moe.variant.value}")

    fresh = build_model(config, rng)
    dense = {name: _array(value) for name, value in dense_params.items()}

    mismatched: List[str] = []
    for name, param in fresh.items():
        if ".moe." in name:
            continue
        if name not in dense:
            mismatched.append(f"{name} (missing)")
        elif dense[name].shape != param.shape:
            mismatched.append(f"{name} {dense[name].shape} != {param.shape}")
    for layer in config.moe_layers:
        for part, shape in (("w_in", (config.d_model, moe.expert_dim)),
                            ("w_out", (moe.expert_dim, config.d_model))):
            name = f"{layer_prefix(layer)}ffn.{part}"
            if name not in dense:
                mismatched.append(f"{name} (missing)")
            elif dense[name].shape != shape:
                hidden = dense[name].shape[1] if part == "w_in" else dense[name].shape[0]
                if hidden != moe.expert_dim:
                    raise ConfigError(f"dense FFN hidden dim {hidden} at layer {layer} "
                                      f"must equal expert_dim {moe.expert_dim}")
                mismatched.append(f"{name} {dense[name].shape} != {shape}")
    if mismatched:
        raise ManifestError("dense checkpoint does not fit the target model: " + "; ".join(mismatched))

    params: Dict[str, Tensor] = {}
    for name, param in fresh.items():
        if ".moe." not in name:
            params[name] = parameter(dense[name].copy(), name=name)
            continue
        layer = int(name.split(".")[1])
        local = name[len(moe_prefix(layer)):]
        kind, _, part = local.partition(".")
        copy_dense = kind == "shared" or (kind == "experts" and mode == UpcycleMode.FULL)
        if copy_dense:
            weight = local.rsplit(".", 1)[-1]
            params[name] = parameter(dense[f"{layer_prefix(layer)}ffn.{weight}"].copy(), name=name)
        else:
            params[name] = param
    logger.info("upcycled %d MoE layers (%s, variant %s)", len(config.moe_layers), mode.value,
                moe.variant.value)
    return params

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional
import math

import numpy as np

from core.errors import DataError
from core.rng import Rng
from core.tensor import Tensor, parameter
from core.types import Variant
from moe.aux_losses import AuxLoss
from moe.layer import ExpertCounters, dense_forward, moe_forward
from moe.routing import LayerRouting, RoutingOverrides
from .config import ModelConfig
from .params import layer_prefix, moe_prefix, scoped

INIT_STD = 0.02

Params = Dict[str, Tensor]


@dataclass
class LMOutput:
    """Forward pass result of the language model."""
    logits: Tensor  # B x T x V
    routing: List[LayerRouting] = field(default_factory=list)  # one entry per MoE layer
    aux: AuxLoss = field(default_factory=AuxLoss)


def _expert_arrays(rng: Rng, d_model: int, hidden: int) -> Dict[str, np.ndarray]:
    return {"w_in": rng.normal((d_model, hidden), INIT_STD),
            "w_out": rng.normal((hidden, d_model), INIT_STD)}


def init_moe_layer(config: ModelConfig, rng: Rng) -> Dict[str, np.ndarray]:
    """Fresh parameters of one MoE sublayer, names relative to the layer prefix."""
    moe = config.moe
    d = config.d_model
    arrays: Dict[str, np.ndarray] = {}
    if moe.variant == Variant.XMOE:
        arrays["router.down_proj"] = rng.normal((d, moe.xmoe_routing_dim), moe.router_init_std)
        arrays["router.expert_embeddings"] = rng.normal((moe.xmoe_routing_dim, moe.n_routable),
                                                        moe.router_init_std)
        arrays["router.temperature"] = np.full((1,), moe.xmoe_init_temperature, dtype=np.float32)
    else:
        arrays["router.weight"] = rng.normal((d, moe.n_routable), moe.router_init_std)
    for i in range(moe.n_experts):
        for name, value in _expert_arrays(rng, d, moe.expert_dim).items():
            arrays[f"experts.{i}.{name}"] = value
    for s in range(moe.n_shared):
        for name, value in _expert_arrays(rng, d, moe.expert_dim).items():
            arrays[f"shared.{s}.{name}"] = value
    return arrays


def build_model(config: ModelConfig, rng: Rng) -> Params:
    """
    Initialize every parameter of the decoder-only model.

    Non-router weights are drawn from N(0, 0.02), router weights from
    N(0, router_init_std), norm gains start at 1. The output head is untied.
    """
    config.validate()
    d = config.d_model
    arrays: Dict[str, np.ndarray] = {
        "tok_emb": rng.normal((config.vocab_size, d), INIT_STD),
        "pos_emb": rng.normal((config.seq_len, d), INIT_STD),
    }
    for layer in range(config.n_layers):
        prefix = layer_prefix(layer)
        arrays[prefix + "attn_norm"] = np.ones(d, dtype=np.float32)
        for name in ("wq", "wk", "wv", "wo"):
            arrays[f"{prefix}attn.{name}"] = rng.normal((d, d), INIT_STD)
        arrays[prefix + "ffn_norm"] = np.ones(d, dtype=np.float32)
        if config.is_moe_layer(layer):
            for name, value in init_moe_layer(config, rng).items():
                arrays[moe_prefix(layer) + name] = value
        else:
            hidden = config.moe.dense_hidden_dim
            for name, value in _expert_arrays(rng, d, hidden).items():
                arrays[f"{prefix}ffn.{name}"] = value
    arrays["final_norm"] = np.ones(d, dtype=np.float32)
    arrays["head"] = rng.normal((d, config.vocab_size), INIT_STD)
    return {name: parameter(value, name=name) for name, value in arrays.items()}


def _attention(x: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Causal multi-head self-attention over B x T x d."""
    batch, length, d = x.shape
    heads, d_head = config.n_heads, config.d_head

    def split(t: Tensor) -> Tensor:
        return t.reshape(batch, length, heads, d_head).transpose(0, 2, 1, 3)

    q = split(x @ params["attn.wq"])
    k = split(x @ params["attn.wk"])
    v = split(x @ params["attn.wv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d_head))
    future = np.triu(np.ones((length, length), dtype=bool), k=1)
    weights = scores.masked_fill(future, -np.inf).softmax(axis=-1)
    context = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, length, d)
    return context @ params["attn.wo"]


def forward_lm(params: Mapping[str, Tensor], tokens: np.ndarray, config: ModelConfig,
               overrides: Optional[RoutingOverrides] = None,
               counters: Optional[ExpertCounters] = None,
               token_offset: int = 0) -> LMOutput:
    """
    Run the model over a B x T block of token ids.

    Returns logits, one LayerRouting per MoE layer (B*T records each,
    positions token_offset + b*T + t) and the summed auxiliary losses.
    The trainer assembles CE + balance + z.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise DataError(f"tokens must be B x T, got shape {tokens.shape}")
    batch, length = tokens.shape
    if length > config.seq_len:
        raise DataError(f"sequence length {length} exceeds configured seq_len {config.seq_len}")
    bad = np.argwhere((tokens < 0) | (tokens >= config.vocab_size))
    if bad.size:
        b, t = (int(i) for i in bad[0])
        raise DataError(f"token id {int(tokens[b, t])} at position ({b}, {t}) outside [0, {config.vocab_size})")

    h = params["tok_emb"].take_rows(tokens) + params["pos_emb"].take_rows(np.arange(length))
    output = LMOutput(logits=h)
    for layer in range(config.n_layers):
        layer_params = scoped(params, layer_prefix(layer))
        h = h + _attention(h.rms_norm(layer_params["attn_norm"]), layer_params, config)
        normed = h.rms_norm(layer_params["ffn_norm"]).reshape(batch * length, config.d_model)
        if config.is_moe_layer(layer):
            moe_out = moe_forward(normed, config.moe, scoped(layer_params, "moe"), layer=layer,
                                  overrides=overrides, counters=counters, token_offset=token_offset)
            ffn_out = moe_out.y
            output.routing.append(moe_out.routing)
            output.aux.add(moe_out.balance, moe_out.z, moe_out.aux)
        else:
            ffn_out = dense_forward(normed, layer_params)
        h = h + ffn_out.reshape(batch, length, config.d_model)

    output.logits = h.rms_norm(params["final_norm"]) @ params["head"]
    return output

from dataclasses import dataclass
from typing import Iterator, List, Mapping, Optional, Tuple

import numpy as np

from core.errors import ConfigError, DimensionError
from core.ops import score_activation, topk_indices
from core.tensor import Tensor
from core.types import Perturbation, ScoreKind, Variant
from .config import MoEConfig

# Keeps renormalized sigmoid gates finite when every selected score underflows
_GATE_EPS = 1e-12


@dataclass
class RoutingOverrides:
    """Evaluation-time changes applied inside route(); nothing is retrained."""
    temperature: Optional[float] = None  # Replaces MoEConfig.temperature when set
    perturbation: Optional[Perturbation] = None

    def effective_temperature(self, config: MoEConfig) -> float:
        return config.temperature if self.temperature is None else self.temperature

    def validate(self, config: MoEConfig) -> None:
        if self.temperature is not None and self.temperature <= 0:
            raise ConfigError(f"temperature override must be positive, got {self.temperature}")
        if self.perturbation is None or config.is_dense:
            return
        needed = config.top_k + self.perturbation.dropped
        if self.perturbation.dropped > config.top_k:
            raise ConfigError(f"{self.perturbation.value} needs top_k >= {self.perturbation.dropped}, "
                              f"got {config.top_k}")
        if config.n_routable < needed:
            raise ConfigError(f"{self.perturbation.value} needs at least {needed} routable experts, "
                              f"variant {config.variant.value} has {config.n_routable}")


@dataclass
class RoutingRecord:
    """Routing decision for one token at one layer."""
    layer: int
    token_position: int
    selected_ids: List[int]
    gate_weights: List[float]
    full_logits: List[float]


@dataclass
class RouterOutput:
    """
    Output of a router for T tokens.

    gates are the mixing weights (renormalized for sigmoid routers),
    raw_gates the activation values before renormalization, and logits the
    temperature-scaled pre-mask scores (still on the graph for aux losses).
    """
    gates: Tensor  # T x K
    ids: np.ndarray  # T x K, descending gate order
    logits: Tensor  # T x N
    raw_gates: np.ndarray  # T x K
    score_kind: ScoreKind

    @property
    def full_logits(self) -> np.ndarray:
        return self.logits.data


@dataclass
class LayerRouting:
    """Routing decisions of one MoE layer over a block of tokens."""
    layer: int
    positions: np.ndarray  # T
    ids: np.ndarray  # T x K
    gates: np.ndarray  # T x K
    logits: np.ndarray  # T x N
    score_kind: ScoreKind

    @classmethod
    def from_router(cls, layer: int, output: RouterOutput, offset: int = 0) -> "LayerRouting":
        n_tokens = output.ids.shape[0]
        return cls(layer=layer, positions=np.arange(offset, offset + n_tokens, dtype=np.int64),
                   ids=output.ids.copy(), gates=output.gates.data.copy(),
                   logits=output.full_logits.copy(), score_kind=output.score_kind)

    def __len__(self) -> int:
        return self.ids.shape[0]

    def records(self) -> Iterator[RoutingRecord]:
        for row in range(len(self)):
            yield RoutingRecord(layer=self.layer, token_position=int(self.positions[row]),
                                selected_ids=[int(i) for i in self.ids[row]],
                                gate_weights=[float(g) for g in self.gates[row]],
                                full_logits=[float(v) for v in self.logits[row]])


def perturbed_ids(full_logits: np.ndarray, top_k: int, mode: Perturbation) -> np.ndarray:
    """
    Replace the top-ranked selection(s) with the next unselected experts.

    drop_top1 keeps ranks 2..K+1, drop_top1_2 keeps ranks 3..K+2
    (ranking by full_logits, ties toward the lower id).
    """
    dropped = mode.dropped
    n = full_logits.shape[-1]
    if top_k + dropped > n or dropped > top_k:
        raise ConfigError(f"{mode.value} needs top_k >= {dropped} and {top_k + dropped} experts, got {n}")
    ranked = topk_indices(full_logits, top_k + dropped)
    return ranked[..., dropped:]


def selected_gates(full_logits: np.ndarray, ids: np.ndarray, score_kind: ScoreKind) -> np.ndarray:
    """Mixing weights of a given selection: masked softmax, or renormalized sigmoid."""
    chosen = np.take_along_axis(np.asarray(full_logits, dtype=np.float64), ids, axis=-1)
    if score_kind == ScoreKind.SOFTMAX:
        shifted = np.exp(chosen - chosen.max(axis=-1, keepdims=True))
        return shifted / shifted.sum(axis=-1, keepdims=True)
    raw = 1.0 / (1.0 + np.exp(-chosen))
    return raw / (raw.sum(axis=-1, keepdims=True) + _GATE_EPS)


def perturb_selection(records: LayerRouting, mode: Perturbation, top_k: Optional[int] = None
                      ) -> Tuple[np.ndarray, np.ndarray]:
    """DropTop perturbation of logged decisions; returns (ids, recomputed gates)."""
    k = top_k or records.ids.shape[1]
    ids = perturbed_ids(records.logits, k, mode)
    return ids, selected_gates(records.logits, ids, records.score_kind)


def select_experts(logits: Tensor, config: MoEConfig,
                   overrides: Optional[RoutingOverrides] = None) -> RouterOutput:
    """
    TopK_{-inf} masking followed by the scoring activation (mask, then activate).

    The temperature divides softmax logits only; sigmoid routers ignore it.
    """
    overrides = overrides or RoutingOverrides()
    tau = overrides.effective_temperature(config)
    if tau != 1.0 and config.score_kind == ScoreKind.SOFTMAX:
        logits = logits / tau

    if overrides.perturbation is not None:
        ids = perturbed_ids(logits.data, config.top_k, overrides.perturbation)
    else:
        ids = topk_indices(logits.data, config.top_k)

    mask = np.ones(logits.shape, dtype=bool)
    np.put_along_axis(mask, ids, False, axis=-1)
    scores = score_activation(logits.masked_fill(mask, -np.inf), config.score_kind, axis=-1)
    gates = scores.pick(ids)
    raw_gates = gates.data.copy()
    if config.score_kind == ScoreKind.SIGMOID:
        gates = gates / (gates.sum(axis=-1, keepdims=True) + _GATE_EPS)
    return RouterOutput(gates=gates, ids=ids, logits=logits, raw_gates=raw_gates,
                        score_kind=config.score_kind)


def route(x: Tensor, config: MoEConfig, router_params: Mapping[str, Tensor],
          overrides: Optional[RoutingOverrides] = None) -> RouterOutput:
    """
    Route T tokens: logits = x W_r (or the XMoE cosine path), then select.

    Args:
        x: Token representations, T x d
        config: Layer configuration
        router_params: 'router.weight' (d x N), or the XMoE router arrays
        overrides: Evaluation-time temperature / perturbation

    Returns:
        RouterOutput with gates, ids and full logits
    """
    if config.top_k > config.n_routable:
        raise ConfigError(f"top_k={config.top_k} exceeds {config.n_routable} routable experts")
    if config.variant == Variant.XMOE:
        return route_xmoe(x, router_params["router.down_proj"], router_params["router.expert_embeddings"],
                          router_params["router.temperature"], config.top_k, config, overrides)
    weight = router_params["router.weight"]
    if weight.shape != (x.shape[-1], config.n_routable):
        raise DimensionError(f"router weight {weight.shape} does not match input width {x.shape[-1]} "
                             f"and {config.n_routable} routable experts")
    return select_experts(x @ weight, config, overrides)


def route_xmoe(x: Tensor, down_proj: Tensor, expert_embeddings: Tensor, learned_temp: Tensor,
               top_k: int, config: MoEConfig, overrides: Optional[RoutingOverrides] = None,
               eps: float = 1e-8) -> RouterOutput:
    """
    Cosine router in a low-dimensional space.

    logits_i = cos(x W_down, emb_i) * exp(learned_temp), followed by the
    same TopK_{-inf} + softmax as route().
    """
    if down_proj.shape[0] != x.shape[-1] or expert_embeddings.shape[0] != down_proj.shape[1]:
        raise DimensionError(f"xmoe router shapes do not chain: x {x.shape}, down_proj {down_proj.shape}, "
                             f"embeddings {expert_embeddings.shape}")
    if config.top_k != top_k:
        config = config.with_changes(top_k=top_k)
    projected = (x @ down_proj).l2_normalize(axis=-1, eps=eps)
    embeddings = expert_embeddings.l2_normalize(axis=0, eps=eps)
    logits = (projected @ embeddings) * learned_temp.exp()
    return select_experts(logits, config, overrides)

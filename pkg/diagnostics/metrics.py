from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
import logging

import numpy as np

from core.errors import ConfigError, DataError
from core.types import ScoreKind
from moe.routing import LayerRouting
from .routing_log import RoutingLog

logger = logging.getLogger(__name__)


@dataclass
class LayerValues:
    """A scalar diagnostic per MoE layer plus its aggregate over layers."""
    per_layer: Dict[int, float]
    aggregate: float
    parameters: Dict[str, object] = field(default_factory=dict)


def entropy_bits(p: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shannon entropy in bits with 0*log(0) := 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


def _clip_unit(value):
    return np.clip(value, 0.0, 1.0)


def selection_counts(routing: LayerRouting, n_experts: int) -> np.ndarray:
    """How often each routable expert is selected, counting all K slots."""
    return np.bincount(routing.ids.reshape(-1), minlength=n_experts).astype(np.int64)


def eae(counts: np.ndarray) -> float:
    """
    Expert activation entropy: entropy of selection frequencies over log2(N).

    Raises:
        ConfigError: fewer than 2 experts
        DataError: negative or all-zero counts
    """
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.shape[-1]
    if n < 2:
        raise ConfigError(f"EAE needs at least 2 experts, got {n}")
    if np.any(counts < 0):
        raise DataError("selection counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise DataError("EAE of all-zero selection counts is undefined")
    return float(_clip_unit(entropy_bits(counts / total) / np.log2(n)))


def eae_per_layer(log: RoutingLog) -> LayerValues:
    per_layer = {layer_id: eae(selection_counts(log.layers[layer_id], log.n_experts))
                 for layer_id in log.layer_ids}
    total = sum((selection_counts(log.layers[layer_id], log.n_experts) for layer_id in log.layer_ids),
                np.zeros(log.n_experts, dtype=np.int64))
    return LayerValues(per_layer=per_layer, aggregate=eae(total), parameters={"n_experts": log.n_experts})


def shard_bounds(n_tokens: int, n_shards: int) -> List[Tuple[int, int]]:
    """Contiguous [start, stop) row ranges of near-equal size."""
    if n_shards < 1:
        raise ConfigError(f"n_shards must be positive, got {n_shards}")
    edges = np.linspace(0, n_tokens, n_shards + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def eae_by_shard(log: RoutingLog, n_shards: int) -> Dict[int, List[Optional[float]]]:
    """EAE per layer for each contiguous shard of the evaluation tokens; empty shards give None."""
    result: Dict[int, List[Optional[float]]] = {}
    for layer_id in log.layer_ids:
        routing = log.layers[layer_id]
        values: List[Optional[float]] = []
        for start, stop in shard_bounds(len(routing), n_shards):
            if stop <= start:
                logger.warning("layer %d shard [%d, %d) is empty", layer_id, start, stop)
                values.append(None)
                continue
            counts = np.bincount(routing.ids[start:stop].reshape(-1), minlength=log.n_experts)
            values.append(eae(counts))
        result[layer_id] = values
    return result


def ewa(gate_weights: np.ndarray) -> np.ndarray:
    """
    Per-token entropy of the selected gate weights over log2(K).

    Weights are renormalized to sum 1 first (sigmoid gates need it).
    Accepts one K-vector or a T x K block.
    """
    weights = np.atleast_2d(np.asarray(gate_weights, dtype=np.float64))
    k = weights.shape[-1]
    if k < 2:
        raise ConfigError(f"EWA needs K >= 2, got K={k}")
    if np.any(weights < 0):
        raise DataError("gate weights must be non-negative")
    totals = weights.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0):
        raise DataError("gate weights of a token sum to zero")
    values = _clip_unit(entropy_bits(weights / totals) / np.log2(k))
    return values if np.ndim(gate_weights) > 1 else values.reshape(())


@dataclass
class EwaSummary:
    per_layer: Dict[int, float]
    per_shard: Dict[int, List[float]]
    aggregate: float


def ewa_summary(log: RoutingLog, n_shards: int = 1) -> EwaSummary:
    """Mean EWA per layer, per contiguous shard and over all entries."""
    per_layer: Dict[int, float] = {}
    per_shard: Dict[int, List[float]] = {}
    everything = []
    for layer_id in log.layer_ids:
        values = ewa(log.layers[layer_id].gates)
        everything.append(values)
        per_layer[layer_id] = float(values.mean())
        per_shard[layer_id] = [float(values[a:b].mean()) if b > a else float("nan")
                               for a, b in shard_bounds(len(values), n_shards)]
    if not everything:
        raise DataError("routing log is empty")
    return EwaSummary(per_layer=per_layer, per_shard=per_shard,
                      aggregate=float(np.concatenate(everything).mean()))


def _overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row |set(a) & set(b)|; ids inside a row are distinct."""
    return (a[:, :, None] == b[:, None, :]).sum(axis=(1, 2))


def _paired(log_a: RoutingLog, log_b: RoutingLog):
    log_a.check_aligned(log_b)
    for layer_id in log_a.layer_ids:
        yield layer_id, log_a.layers[layer_id], log_b.layers[layer_id]


def router_saturation(log_t: RoutingLog, log_final: RoutingLog, k: Optional[int] = None) -> LayerValues:
    """
    Mean overlap |topk_t & topk_final| / k of the k leading selections per token.

    Raises:
        AlignmentError: logs cover different (layer, token) keys
        ConfigError: k outside [1, K] of either log
    """
    k = k or min(log_t.top_k, log_final.top_k)
    if not 1 <= k <= min(log_t.top_k, log_final.top_k):
        raise ConfigError(f"saturation k={k} must lie in [1, {min(log_t.top_k, log_final.top_k)}]")
    per_layer: Dict[int, float] = {}
    overlaps = []
    for layer_id, a, b in _paired(log_t, log_final):
        ratio = _overlap(a.ids[:, :k], b.ids[:, :k]) / k
        overlaps.append(ratio)
        per_layer[layer_id] = float(ratio.mean())
    aggregate = float(np.concatenate(overlaps).mean()) if overlaps else 1.0
    return LayerValues(per_layer=per_layer, aggregate=aggregate,
                       parameters={"k": k, "step": log_t.header.step, "final_step": log_final.header.step})


def expert_change_rate(log_a: RoutingLog, log_b: RoutingLog, fractional: bool = False) -> LayerValues:
    """
    Fraction of (layer, token) entries whose top-K set differs between two logs.

    fractional=True averages 1 - |A & B| / K instead of the binary indicator.
    """
    if log_a.top_k != log_b.top_k:
        raise ConfigError(f"logs select different K ({log_a.top_k} vs {log_b.top_k})")
    k = log_a.top_k
    per_layer: Dict[int, float] = {}
    changes = []
    for layer_id, a, b in _paired(log_a, log_b):
        overlap = _overlap(a.ids, b.ids)
        changed = 1.0 - overlap / k if fractional else (overlap < k).astype(np.float64)
        changes.append(changed)
        per_layer[layer_id] = float(changed.mean())
    aggregate = float(np.concatenate(changes).mean()) if changes else 0.0
    return LayerValues(per_layer=per_layer, aggregate=aggregate,
                       parameters={"fractional": fractional, "steps": [log_a.header.step, log_b.header.step]})


def gating_scores(logits: np.ndarray, score_kind: ScoreKind) -> np.ndarray:
    """Activation over all N logits: softmax, or raw sigmoid."""
    logits = np.asarray(logits, dtype=np.float64)
    if ScoreKind(score_kind) == ScoreKind.SOFTMAX:
        shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return shifted / shifted.sum(axis=-1, keepdims=True)
    return 1.0 / (1.0 + np.exp(-logits))


def router_margin(log: RoutingLog) -> LayerValues:
    """Mean gap between the top-1 and top-2 gating scores of the full router output."""
    if log.n_experts < 2:
        raise ConfigError(f"router margin needs at least 2 experts, got {log.n_experts}")
    per_layer: Dict[int, float] = {}
    margins = []
    for layer_id in log.layer_ids:
        scores = np.sort(gating_scores(log.layers[layer_id].logits, log.header.score_kind), axis=-1)
        margin = scores[:, -1] - scores[:, -2]
        margins.append(margin)
        per_layer[layer_id] = float(margin.mean())
    aggregate = float(np.concatenate(margins).mean()) if margins else 0.0
    return LayerValues(per_layer=per_layer, aggregate=aggregate,
                       parameters={"score": log.header.score_kind.value})


@dataclass
class CoActivation:
    """ECA(i, j) = N_ij / N_i, with the rows of never-selected experts flagged."""
    matrix: np.ndarray  # N x N
    counts: np.ndarray  # N_i
    empty_rows: List[int]


def eca(routing: LayerRouting, n_experts: int) -> CoActivation:
    """Expert co-activation of one layer (or a concatenation of layers)."""
    ids = routing.ids
    onehot = np.zeros((len(ids), n_experts), dtype=np.int64)
    np.put_along_axis(onehot, ids, 1, axis=1)
    joint = onehot.T @ onehot  # N_ij, diagonal holds N_i
    counts = np.diag(joint).copy()
    matrix = np.zeros((n_experts, n_experts), dtype=np.float64)
    active = counts > 0
    matrix[active] = joint[active] / counts[active, None]
    empty_rows = [int(i) for i in np.flatnonzero(~active)]
    if empty_rows:
        logger.warning("experts %s never selected at layer %d; ECA rows left at zero", empty_rows, routing.layer)
    return CoActivation(matrix=matrix, counts=counts, empty_rows=empty_rows)


def eca_per_layer(log: RoutingLog) -> Dict[int, CoActivation]:
    return {layer_id: eca(log.layers[layer_id], log.n_experts) for layer_id in log.layer_ids}


def selection_ratio(log: RoutingLog) -> Dict[int, np.ndarray]:
    """Per-layer share of token slots handed to each expert (sums to 1)."""
    result = {}
    for layer_id in log.layer_ids:
        counts = selection_counts(log.layers[layer_id], log.n_experts)
        result[layer_id] = counts / max(int(counts.sum()), 1)
    return result

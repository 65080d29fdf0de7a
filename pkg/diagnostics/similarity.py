from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from core.errors import ConfigError
from core.tensor import Tensor
from model.config import ModelConfig
from model.params import moe_prefix
from output.checkpoint import load_checkpoint


@dataclass
class ExpertSimilarity:
    """Pairwise cosine similarity of expert output projections at one layer."""
    layer: int
    matrix: np.ndarray  # N_E x N_E
    labels: List[str]

    @property
    def mean(self) -> float:
        """Mean over distinct pairs (upper triangle)."""
        rows, cols = np.triu_indices(len(self.labels), k=1)
        return float(self.matrix[rows, cols].mean())


def _array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def expert_similarity(params: Mapping[str, object], config: ModelConfig, layer: int,
                      eps: float = 1e-12) -> ExpertSimilarity:
    """
    Cosine similarity between the flattened W_out of every FFN expert pair.

    Only parameterized experts take part; negated slots share their base
    expert's weights, zero and copy slots have none.

    Raises:
        ConfigError: layer is not a MoE layer or has fewer than 2 FFN experts
    """
    if not config.is_moe_layer(layer):
        raise ConfigError(f"layer {layer} is not a MoE layer")
    n_experts = config.moe.n_experts
    if n_experts < 2:
        raise ConfigError(f"expert similarity needs at least 2 parameterized experts, got {n_experts}")
    prefix = moe_prefix(layer)
    flat = np.stack([_array(params[f"{prefix}experts.{i}.w_out"]).astype(np.float64).reshape(-1)
                     for i in range(n_experts)])
    norms = np.linalg.norm(flat, axis=1)
    matrix = (flat @ flat.T) / np.maximum(np.outer(norms, norms), eps)
    return ExpertSimilarity(layer=layer, matrix=np.clip(matrix, -1.0, 1.0),
                            labels=[f"E{i}" for i in range(n_experts)])


def similarity_curves(checkpoints: Sequence[Union[str, Path]]) -> Dict[int, List[Tuple[int, float]]]:
    """Mean pairwise similarity per MoE layer across a checkpoint series: {layer: [(step, mean)]}."""
    curves: Dict[int, List[Tuple[int, float]]] = {}
    for path in checkpoints:
        checkpoint = load_checkpoint(path)
        config = checkpoint.model_config()
        for layer in config.moe_layers:
            curves.setdefault(layer, []).append(
                (checkpoint.step, expert_similarity(checkpoint.arrays, config, layer).mean))
    return curves

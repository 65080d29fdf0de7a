from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor, current_dtype
from .types import ScoreKind


@dataclass
class MaskedLogits:
    """TopK_{-inf} result: masked logits plus the kept indices in rank order."""
    masked: Tensor
    indices: np.ndarray


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a @ b


def score_activation(x: Tensor, kind: Union[ScoreKind, str], axis: int = -1) -> Tensor:
    """Softmax or sigmoid scoring; -inf entries map to 0 under both."""
    kind = ScoreKind(kind)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    if kind == ScoreKind.SOFTMAX:
        return x.softmax(axis=axis)
    return x.sigmoid()


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """
    Indices of the k largest entries along the last axis.

    Ordered by descending value; ties go to the lower index.
    """
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"top-k needs 1 <= k <= {n}, got k={k}")
    # Stable sort of the negated values keeps ascending index order among ties
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., :k]


def topk_mask(logits: Tensor, k: int) -> MaskedLogits:
    """Keep the top-k logits along the last axis and set the rest to -inf."""
    indices = topk_indices(logits.data, k)
    mask = np.ones(logits.shape, dtype=bool)
    np.put_along_axis(mask, indices, False, axis=-1)
    return MaskedLogits(masked=logits.masked_fill(mask, -np.inf), indices=indices)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token-level negative log-likelihood over a B x V logit matrix."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects logits [B x V] and targets [B], "
                             f"got {logits.shape} and {targets.shape}")
    vocab = logits.shape[1]
    bad = np.nonzero((targets < 0) | (targets >= vocab))[0]
    if bad.size:
        position = int(bad[0])
        raise DataError(f"target id {int(targets[position])} at position {position} outside [0, {vocab})")

    x = logits.data
    rows = np.arange(x.shape[0])
    peak = x.max(axis=1, keepdims=True)
    shifted = np.exp(x - peak)
    total = shifted.sum(axis=1, keepdims=True)
    log_norm = (peak + np.log(total))[:, 0]
    loss = np.mean(log_norm - x[rows, targets], dtype=np.float64)

    def backward(g):
        grad = shifted / total
        grad[rows, targets] -= 1.0
        return (grad * (g / x.shape[0]),)

    return Tensor._result(np.asarray(loss, dtype=current_dtype()), (logits,), backward)


def backward(loss: Tensor) -> None:
    loss.backward()

from dataclasses import dataclass
from typing import Mapping, Optional
import logging
import math

import numpy as np

from core.ops import cross_entropy
from core.tensor import Tensor, no_grad
from diagnostics.routing_log import RoutingLog, RoutingLogHeader
from model.config import ModelConfig
from model.transformer import forward_lm
from moe.routing import RoutingOverrides
from preprocessing.corpus import eval_windows

logger = logging.getLogger(__name__)


@dataclass
class EvalResult:
    """Perplexity of one split plus the routing decisions made on it."""
    ppl: float
    mean_ce: float
    n_tokens: int
    routing: Optional[RoutingLog] = None


def evaluate_params(params: Mapping[str, Tensor], config: ModelConfig, tokens: np.ndarray,
                    overrides: Optional[RoutingOverrides] = None, max_windows: int = 0,
                    batch_size: int = 16, collect_routing: bool = True,
                    run_id: str = "run", step: int = 0) -> EvalResult:
    """
    ppl = exp(mean CE) over fixed non-overlapping windows of `tokens`.

    Overrides act inside route() only; nothing is updated. Routing records
    carry the token position inside the split, so every checkpoint evaluated
    on the same split yields aligned logs.

    Raises:
        ConfigError: overrides invalid for the variant
        DataError: split too short for one window
    """
    overrides = overrides or RoutingOverrides()
    overrides.validate(config.moe)
    windows = eval_windows(tokens, config.seq_len, max_windows)
    length = windows[0][0].shape[1]

    total_ce = 0.0
    n_tokens = 0
    routing_batches = []
    with no_grad():
        for start in range(0, len(windows), batch_size):
            chunk = windows[start:start + batch_size]
            inputs = np.concatenate([w[0] for w in chunk])
            targets = np.concatenate([w[1] for w in chunk])
            out = forward_lm(params, inputs, config, overrides=overrides, token_offset=start * length)
            n = targets.size
            ce = cross_entropy(out.logits.reshape(n, config.vocab_size), targets.reshape(-1))
            total_ce += float(ce.data) * n
            n_tokens += n
            if collect_routing and out.routing:
                routing_batches.append(out.routing)

    mean_ce = total_ce / n_tokens
    routing = None
    if routing_batches:
        moe = config.moe
        header = RoutingLogHeader(run_id=run_id, step=step, n_layers=len(config.moe_layers),
                                  n_experts=moe.n_routable, top_k=moe.top_k, variant=moe.variant,
                                  slot_labels=moe.slot_labels())
        routing = RoutingLog.from_batches(header, routing_batches)
    return EvalResult(ppl=math.exp(mean_ce), mean_ce=mean_ce, n_tokens=n_tokens, routing=routing)

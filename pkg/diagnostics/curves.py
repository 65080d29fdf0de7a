from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from core.errors import DataError
from .metrics import LayerValues, expert_change_rate, router_margin, router_saturation
from .routing_log import RoutingLog

Curve = List[Tuple[int, float]]


def load_logs(paths: Sequence[Union[str, Path]]) -> List[RoutingLog]:
    """Read routing logs and order them by checkpoint step."""
    logs = [RoutingLog.read(path) for path in paths]
    return sorted(logs, key=lambda log: log.header.step)


def _split(values: Sequence[Tuple[int, LayerValues]]) -> Dict[str, Curve]:
    curves: Dict[str, Curve] = {"all": []}
    for step, value in values:
        curves["all"].append((step, value.aggregate))
        for layer, v in value.per_layer.items():
            curves.setdefault(f"layer {layer}", []).append((step, v))
    return curves


def ecr_curve(logs: Sequence[RoutingLog], fractional: bool = False) -> Dict[str, Curve]:
    """ECR between consecutive checkpoints, indexed by the later step."""
    if len(logs) < 2:
        raise DataError(f"ECR curve needs at least 2 routing logs, got {len(logs)}")
    return _split([(b.header.step, expert_change_rate(a, b, fractional=fractional))
                   for a, b in zip(logs[:-1], logs[1:])])


def saturation_curve(logs: Sequence[RoutingLog], k: Optional[int] = None) -> Dict[str, Curve]:
    """Saturation of every checkpoint against the last one."""
    if not logs:
        raise DataError("saturation curve needs at least one routing log")
    final = logs[-1]
    return _split([(log.header.step, router_saturation(log, final, k)) for log in logs])


def margin_curve(logs: Sequence[RoutingLog]) -> Dict[str, Curve]:
    """Router margin per layer for every saved routing log."""
    if not logs:
        raise DataError("margin curve needs at least one routing log")
    return _split([(log.header.step, router_margin(log)) for log in logs])

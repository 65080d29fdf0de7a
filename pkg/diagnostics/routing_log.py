from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union
import gzip
import io
import json
import logging

import numpy as np

from core.errors import AlignmentError, DataError
from core.types import ScoreKind, Variant
from moe.routing import LayerRouting

logger = logging.getLogger(__name__)

Key = Tuple[int, int]  # (layer, token position)


@dataclass
class RoutingLogHeader:
    run_id: str
    step: int
    n_layers: int
    n_experts: int  # routable pool size N
    top_k: int
    variant: Variant
    slot_labels: Optional[List[str]] = None  # MoEConfig.slot_labels() of the run

    @property
    def score_kind(self) -> ScoreKind:
        return self.variant.score_kind

    @property
    def labels(self) -> List[str]:
        """Names of the N routable slots; E0..E{N-1} when the header carries none."""
        if self.slot_labels is not None:
            return list(self.slot_labels)
        return [f"E{i}" for i in range(self.n_experts)]

    def to_dict(self) -> Dict[str, object]:
        data = {"run_id": self.run_id, "step": self.step, "n_layers": self.n_layers,
                "n_experts": self.n_experts, "top_k": self.top_k, "variant": self.variant.value}
        if self.slot_labels is not None:
            data["slot_labels"] = list(self.slot_labels)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "RoutingLogHeader":
        try:
            return cls(run_id=str(data["run_id"]), step=int(data["step"]), n_layers=int(data["n_layers"]),
                       n_experts=int(data["n_experts"]), top_k=int(data["top_k"]),
                       variant=Variant(data["variant"]), slot_labels=data.get("slot_labels"))
        except (KeyError, ValueError) as e:
            raise DataError(f"invalid routing log header: {e}") from e


def _sorted(layer: LayerRouting) -> LayerRouting:
    order = np.argsort(layer.positions, kind="stable")
    positions = layer.positions[order]
    if len(positions) > 1 and np.any(positions[1:] == positions[:-1]):
        dup = int(positions[1:][positions[1:] == positions[:-1]][0])
        raise DataError(f"routing log has duplicate entry for layer {layer.layer}, token {dup}")
    return LayerRouting(layer=layer.layer, positions=positions, ids=layer.ids[order],
                        gates=layer.gates[order], logits=layer.logits[order], score_kind=layer.score_kind)


class RoutingLog:
    """
    Routing decisions of one checkpoint over the fixed validation tokens.

    Stored per layer as arrays sorted by token position, so aligned logs
    can be compared row by row.
    """

    def __init__(self, header: RoutingLogHeader, layers: Iterable[LayerRouting]):
        self.header = header
        if header.slot_labels is not None and len(header.slot_labels) != header.n_experts:
            raise DataError(f"header names {len(header.slot_labels)} slots for N={header.n_experts}")
        self.layers: Dict[int, LayerRouting] = {}
        for layer in layers:
            if layer.layer in self.layers:
                raise DataError(f"layer {layer.layer} given twice")
            if layer.ids.shape[1] != header.top_k or layer.logits.shape[1] != header.n_experts:
                raise DataError(f"layer {layer.layer} arrays ({layer.ids.shape}, {layer.logits.shape}) "
                                f"do not match header K={header.top_k}, N={header.n_experts}")
            self.layers[layer.layer] = _sorted(layer)

    @classmethod
    def from_batches(cls, header: RoutingLogHeader, batches: Sequence[Sequence[LayerRouting]]) -> "RoutingLog":
        """Concatenate per-window routing (one list of LayerRouting per window)."""
        grouped: Dict[int, List[LayerRouting]] = {}
        for batch in batches:
            for layer in batch:
                grouped.setdefault(layer.layer, []).append(layer)
        layers = []
        for layer_id, parts in sorted(grouped.items()):
            layers.append(LayerRouting(layer=layer_id,
                                       positions=np.concatenate([p.positions for p in parts]),
                                       ids=np.concatenate([p.ids for p in parts]),
                                       gates=np.concatenate([p.gates for p in parts]),
                                       logits=np.concatenate([p.logits for p in parts]),
                                       score_kind=parts[0].score_kind))
        return cls(header, layers)

    @property
    def layer_ids(self) -> List[int]:
        return sorted(self.layers)

    @property
    def top_k(self) -> int:
        return self.header.top_k

    @property
    def n_experts(self) -> int:
        return self.header.n_experts

    def __len__(self) -> int:
        return sum(len(layer) for layer in self.layers.values())

    def keys(self) -> Set[Key]:
        return {(layer_id, int(p)) for layer_id, layer in self.layers.items() for p in layer.positions}

    def check_aligned(self, other: "RoutingLog") -> None:
        """Raise AlignmentError unless both logs cover identical (layer, token) keys."""
        mine, theirs = self.keys(), other.keys()
        if mine == theirs:
            return
        missing = sorted(mine - theirs)
        extra = sorted(theirs - mine)
        raise AlignmentError(f"routing logs are not aligned (steps {self.header.step} and {other.header.step}): "
                             f"{len(missing)} keys missing from the second log {missing[:10]}, "
                             f"{len(extra)} missing from the first {extra[:10]}")

    def aligned_with(self, other: "RoutingLog") -> bool:
        return self.keys() == other.keys()

    def write(self, path: Union[str, Path]) -> Path:
        """Header line, then one JSON object per (layer, token); gzip when the name ends in .gz."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buffer = io.StringIO()
        buffer.write(json.dumps(self.header.to_dict(), sort_keys=True) + "\n")
        for layer_id in self.layer_ids:
            for record in self.layers[layer_id].records():
                row = {"layer": record.layer, "token": record.token_position,
                       "selected_ids": record.selected_ids, "gate_weights": record.gate_weights,
                       "full_logits": record.full_logits}
                buffer.write(json.dumps(row, sort_keys=True) + "\n")
        data = buffer.getvalue().encode("utf-8")
        if path.name.endswith(".gz"):
            # fixed mtime: identical logs give identical bytes
            data = gzip.compress(data, mtime=0)
        path.write_bytes(data)
        logger.debug("wrote routing log %s (%d rows)", path, len(self))
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "RoutingLog":
        path = Path(path)
        raw = path.read_bytes()
        if raw[:2] == b"\x1f\x8b":
            raw = gzip.decompress(raw)
        lines = raw.decode("utf-8").splitlines()
        if not lines:
            raise DataError(f"routing log {path} is empty")
        try:
            header = RoutingLogHeader.from_dict(json.loads(lines[0]))
            rows: Dict[int, List[dict]] = {}
            for line in lines[1:]:
                if line.strip():
                    row = json.loads(line)
                    rows.setdefault(int(row["layer"]), []).append(row)
        except (json.JSONDecodeError, KeyError) as e:
            raise DataError(f"malformed routing log {path}: {e}") from e
        layers = []
        for layer_id, items in sorted(rows.items()):
            layers.append(LayerRouting(
                layer=layer_id,
                positions=np.array([r["token"] for r in items], dtype=np.int64),
                ids=np.array([r["selected_ids"] for r in items], dtype=np.int64).reshape(len(items), -1),
                gates=np.array([r["gate_weights"] for r in items], dtype=np.float32).reshape(len(items), -1),
                logits=np.array([r["full_logits"] for r in items], dtype=np.float32).reshape(len(items), -1),
                score_kind=header.score_kind))
        return cls(header, layers)

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from core.errors import ConfigError
from core.serialization import from_plain, to_plain
from moe.config import MoEConfig


@dataclass
class ModelConfig:
    """Decoder-only backbone dimensions; the FFN sublayer follows `moe`."""
    d_model: int = 128
    n_heads: int = 4
    d_head: int = 32
    n_layers: int = 4
    vocab_size: int = 256
    seq_len: int = 256
    moe: MoEConfig = field(default_factory=MoEConfig)
    moe_layer_indices: Optional[List[int]] = None  # None: every layer

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "d_head", "n_layers", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(f"d_model={self.d_model} must equal n_heads*d_head="
                              f"{self.n_heads}*{self.d_head}")
        if self.seq_len < 2:
            raise ConfigError(f"seq_len must be at least 2, got {self.seq_len}")
        if self.moe_layer_indices is not None:
            outside = [i for i in self.moe_layer_indices if not 0 <= i < self.n_layers]
            if outside:
                raise ConfigError(f"moe_layer_indices {outside} outside [0, {self.n_layers})")
        self.moe.validate()

    @property
    def moe_layers(self) -> List[int]:
        """Layer ids whose FFN sublayer is a MoE layer."""
        if self.moe.is_dense:
            return []
        if self.moe_layer_indices is None:
            return list(range(self.n_layers))
        return sorted(set(self.moe_layer_indices))

    def is_moe_layer(self, layer: int) -> bool:
        return layer in self.moe_layers

    def to_dict(self) -> Dict[str, Any]:
        return to_plain(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return from_plain(cls, data)


@dataclass
class ParamCount:
    """Total vs per-token active parameter counts."""
    total: int
    active: int
    routed_expert_total: int = 0
    routed_expert_active: int = 0

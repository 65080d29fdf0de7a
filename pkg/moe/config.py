from dataclasses import dataclass, replace
from math import log
from typing import Any, Dict, List, Optional

from core.errors import ConfigError
from core.serialization import from_plain, to_plain
from core.types import ExpertType, ScoreKind, Variant


@dataclass(frozen=True)
class ExpertKind:
    """
    One slot of the routable expert pool.

    FFN slots own parameters (base_id is their own FFN index); NEGATED
    slots reuse FFN `base_id` with the sign flipped; ZERO and COPY slots
    are parameter-free.
    """
    kind: ExpertType
    base_id: Optional[int] = None

    @property
    def has_params(self) -> bool:
        return self.kind == ExpertType.FFN

    @property
    def runs_ffn(self) -> bool:
        return self.kind in (ExpertType.FFN, ExpertType.NEGATED)

    def label(self) -> str:
        if self.kind == ExpertType.FFN:
            return f"E{self.base_id}"
        if self.kind == ExpertType.NEGATED:
            return f"-E{self.base_id}"
        return self.kind.name.lower()


@dataclass
class MoEConfig:
    """Routing algorithm, pool shape and auxiliary-loss coefficients of one MoE layer."""
    variant: Variant = Variant.SMOE
    n_experts: int = 8  # Parameterized FFN experts N_E
    top_k: int = 2  # Routed experts per token (shared experts not counted)
    n_shared: int = 0  # Always-active shared experts (SharedE only)
    expert_dim: int = 32
    xmoe_routing_dim: int = 16
    xmoe_init_scale: float = 10.0  # exp(learned temperature) at init
    n_zero_experts: int = 0  # Zero experts (MoE++ / TC-MoE)
    router_init_std: float = 0.02
    balance_coef: float = 0.01
    z_coef: float = 0.0
    temperature: float = 1.0
    dense_dim: Optional[int] = None  # Dense FFN width; defaults to top_k * expert_dim

    @classmethod
    def for_variant(cls, variant: Variant, **overrides: Any) -> "MoEConfig":
        """Desk-scale defaults for a variant."""
        variant = Variant(variant)
        defaults: Dict[str, Any] = {"variant": variant}
        if variant.has_shared:
            defaults["n_shared"] = 1
        if variant.has_virtual_experts:
            defaults["n_zero_experts"] = 2
        defaults.update(overrides)
        return cls(**defaults)

    @property
    def score_kind(self) -> ScoreKind:
        return self.variant.score_kind

    @property
    def is_dense(self) -> bool:
        return self.variant == Variant.DENSE

    @property
    def dense_hidden_dim(self) -> int:
        return self.dense_dim if self.dense_dim is not None else self.top_k * self.expert_dim

    @property
    def xmoe_init_temperature(self) -> float:
        return log(self.xmoe_init_scale)

    def expert_pool(self) -> List[ExpertKind]:
        """Routable slots in id order."""
        if self.is_dense:
            return []
        pool = [ExpertKind(ExpertType.FFN, i) for i in range(self.n_experts)]
        if self.variant == Variant.TCMOE:
            pool += [ExpertKind(ExpertType.NEGATED, i) for i in range(self.n_experts)]
        if self.variant.has_virtual_experts:
            pool += [ExpertKind(ExpertType.ZERO) for _ in range(self.n_zero_experts)]
        if self.variant == Variant.MOEPP:
            pool.append(ExpertKind(ExpertType.COPY))
        return pool

    def slot_labels(self) -> List[str]:
        """Display label per routable slot; repeated labels get their slot id."""
        labels = [kind.label() for kind in self.expert_pool()]
        return [f"{label}{i}" if labels.count(label) > 1 else label for i, label in enumerate(labels)]

    @property
    def n_routable(self) -> int:
        return len(self.expert_pool())

    def validate(self) -> None:
        """Raise ConfigError on inconsistent settings."""
        if self.expert_dim <= 0:
            raise ConfigError(f"expert_dim must be positive, got {self.expert_dim}")
        if self.is_dense:
            if self.dense_hidden_dim <= 0:
                raise ConfigError(f"dense FFN width must be positive, got {self.dense_hidden_dim}")
            return
        if self.n_experts < 1:
            raise ConfigError(f"n_experts must be positive, got {self.n_experts}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be positive, got {self.top_k}")
        if self.top_k > self.n_routable:
            raise ConfigError(f"top_k={self.top_k} exceeds the {self.n_routable} routable experts "
                              f"of variant {self.variant.value}")
        if self.variant.has_shared and self.n_shared < 1:
            raise ConfigError(f"variant {self.variant.value} needs n_shared >= 1")
        if not self.variant.has_shared and self.n_shared:
            raise ConfigError(f"n_shared={self.n_shared} only applies to shared-expert variants")
        if self.n_zero_experts < 0:
            raise ConfigError(f"n_zero_experts must be non-negative, got {self.n_zero_experts}")
        if self.n_zero_experts and not self.variant.has_virtual_experts:
            raise ConfigError(f"n_zero_experts only applies to moepp/tcmoe, not {self.variant.value}")
        if self.variant == Variant.XMOE and self.xmoe_routing_dim < 1:
            raise ConfigError(f"xmoe_routing_dim must be positive, got {self.xmoe_routing_dim}")
        if self.xmoe_init_scale <= 0:
            raise ConfigError(f"xmoe_init_scale must be positive, got {self.xmoe_init_scale}")
        if self.router_init_std <= 0:
            raise ConfigError(f"router_init_std must be positive, got {self.router_init_std}")
        if self.balance_coef < 0 or self.z_coef < 0:
            raise ConfigError("auxiliary loss coefficients must be non-negative")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")

    def with_changes(self, **changes: Any) -> "MoEConfig":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return to_plain(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MoEConfig":
        return from_plain(cls, data)

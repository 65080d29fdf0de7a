from enum import Enum, auto


# Routing algorithm variants
class Variant(Enum):
    SMOE = "smoe"  # Softmax top-K router
    SIGMA_MOE = "sigma_moe"  # Sigmoid top-K router
    XMOE = "xmoe"  # Low-dimensional cosine router
    SHARED_V2 = "shared_v2"  # Shared experts + softmax router
    SHARED_V3 = "shared_v3"  # Shared experts + sigmoid router
    MOEPP = "moepp"  # Zero/copy experts in the routable pool
    TCMOE = "tcmoe"  # Ternary pool {+E, -E, 0}
    DENSE = "dense"  # Plain FFN baseline

    @property
    def score_kind(self) -> "ScoreKind":
        if self in (Variant.SIGMA_MOE, Variant.SHARED_V3):
            return ScoreKind.SIGMOID
        return ScoreKind.SOFTMAX

    @property
    def has_shared(self) -> bool:
        return self in (Variant.SHARED_V2, Variant.SHARED_V3)

    @property
    def has_virtual_experts(self) -> bool:
        return self in (Variant.MOEPP, Variant.TCMOE)


# Scoring activation applied after TopK masking
class ScoreKind(Enum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


# Kinds of slots in the routable expert pool
class ExpertType(Enum):
    FFN = auto()  # Parameterized feed-forward expert
    ZERO = auto()  # Outputs the zero vector
    COPY = auto()  # Outputs its input unchanged
    NEGATED = auto()  # Outputs -E_base(x)


# Evaluation-time routing perturbations
class Perturbation(Enum):
    DROP_TOP1 = "drop_top1"
    DROP_TOP1_2 = "drop_top1_2"

    @property
    def dropped(self) -> int:
        """Number of top-ranked experts replaced."""
        return 1 if self == Perturbation.DROP_TOP1 else 2


# How a run initializes its parameters
class InitMode(Enum):
    SCRATCH = "scratch"
    UPCYCLE_FULL = "upcycle_full"
    UPCYCLE_SHARED_ONLY = "upcycle_shared_only"


# Which experts sparse upcycling copies from the dense FFN
class UpcycleMode(Enum):
    FULL = "full"
    SHARED_ONLY = "shared_only"


# Plot kinds
class PlotKind(Enum):
    LINE = "line"
    HEATMAP = "heatmap"


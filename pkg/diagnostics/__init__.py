from .routing_log import RoutingLog, RoutingLogHeader
from .metrics import (LayerValues, CoActivation, eae, eae_per_layer, eae_by_shard, ewa, ewa_summary,
                      router_saturation, expert_change_rate, router_margin, eca, eca_per_layer, selection_ratio)
from .similarity import ExpertSimilarity, expert_similarity, similarity_curves
from .curves import ecr_curve, saturation_curve, margin_curve, load_logs

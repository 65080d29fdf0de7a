from .config import MoEConfig, ExpertKind
from .routing import RoutingOverrides, RoutingRecord, LayerRouting, route, route_xmoe, perturb_selection
from .aux_losses import AuxLossReport, balance_loss, z_loss
from .layer import moe_forward, ExpertCounters
from .upcycle import upcycle

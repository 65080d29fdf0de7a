from .config import ModelConfig, ParamCount
from .params import count_params
from .transformer import build_model, forward_lm, LMOutput

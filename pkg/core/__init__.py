from .types import *
from .errors import *
from .rng import Rng
from .tensor import Tensor, no_grad, precision

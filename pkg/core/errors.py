class MoELabError(Exception):
    """Base class for every error raised by the lab."""


class ConfigError(MoELabError, ValueError):
    """Invalid or inconsistent configuration."""


class DimensionError(MoELabError, ValueError):
    """Tensor shapes do not fit the operation."""


class DataError(MoELabError, ValueError):
    """Input data out of range, too short or empty."""


class TapeError(MoELabError, RuntimeError):
    """Differentiation graph misuse (e.g. backward twice)."""


class ManifestError(MoELabError, ValueError):
    """Checkpoint manifest and payload disagree."""


class AlignmentError(MoELabError, ValueError):
    """Two routing logs do not cover the same (layer, token) keys."""


class NonFiniteError(MoELabError, ArithmeticError):
    """NaN or Inf reached a place that requires finite values."""

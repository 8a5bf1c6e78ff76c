"""Exception types raised across the package."""


class GfdannError(Exception):
    """Base class for all package errors."""


class DimensionError(GfdannError, ValueError):
    """Tensor or parameter shapes do not line up."""


class InvalidBatchError(GfdannError, ValueError):
    """Batch is unusable for the requested operation (e.g. size 1 in BN training)."""


class ParameterError(GfdannError, ValueError):
    """A numeric argument is outside its admissible range."""


class NumericalError(GfdannError, ArithmeticError):
    """A numerical routine failed (rank deficiency, non-finite values)."""


class LeakageError(GfdannError, ValueError):
    """Held-out data would contaminate a training-time computation."""


class RoutingError(GfdannError, ValueError):
    """Samples were routed to a branch or head they do not belong to."""


class MissingLabelsError(GfdannError, ValueError):
    """A training step was called without the labels it needs."""


class ConfigError(GfdannError, ValueError):
    """Experiment configuration failed validation."""


class DataError(GfdannError, ValueError):
    """Dataset on disk is missing, malformed, or inconsistent with the config."""


class NumericFloorWarning(RuntimeWarning):
    """A probability was clamped to the numeric floor before taking its log."""

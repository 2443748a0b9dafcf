class OensError(Exception):
    """Base class for package errors."""


class ConfigError(OensError, ValueError):
    """Invalid configuration, flags or arguments."""


class ShapeError(OensError, ValueError):
    pass


class NumericalError(OensError, ArithmeticError):
    """A NaN or Inf appeared during a computation; the run is aborted."""


class StaleTraceError(OensError, RuntimeError):
    """A forward trace was used after its parameters changed."""


class DataError(OensError, ValueError):
    """Malformed or inconsistent dataset files."""


class CheckpointError(OensError, ValueError):
    pass

"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or unexpected dimensions."""


class ParameterError(ValueError):
    """A parameter or argument is outside its valid range."""


class ConfigError(ParameterError):
    """A configuration is internally inconsistent."""


class GraphError(RuntimeError):
    """Misuse of an autodiff graph, e.g. backward run twice."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class IngestionError(ValueError):
    """An on-disk input could not be read."""

"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """A numeric hyperparameter is outside its valid range (e.g. T <= 0)."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class TapeError(RuntimeError):
    """Backward was requested for a tensor that is not attached to a tape."""


class LayoutError(ValueError):
    """A sequence layout does not contain (or already contains) a token role."""


class FormatError(ValueError):
    """A binary file is malformed; the message names the failing offset."""


class ConfigError(ValueError):
    """An experiment configuration is missing, unknown, or inconsistent."""

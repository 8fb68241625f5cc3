"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shape or extent mismatch between tensors or layer contracts."""


class NumericError(ArithmeticError):
    """Non-finite values or numerically invalid parameters."""


class LoadError(RuntimeError):
    """Weight or architecture file cannot be loaded."""


class DecodeError(LoadError):
    """Image file cannot be decoded."""


class FormatError(LoadError):
    """Serialized attribution map is malformed."""

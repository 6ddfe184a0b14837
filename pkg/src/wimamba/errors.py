from .numerics.tensor import DimensionError, NumericError


class ConfigurationError(ValueError):
    """Invalid model or task configuration (odd width, unknown granularity, ...)."""


__all__ = ["ConfigurationError", "DimensionError", "NumericError"]

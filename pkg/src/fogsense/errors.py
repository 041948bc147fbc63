"""Exception types shared across the package."""


class FogSenseError(Exception):
    """Base class for package errors."""


class ValidationError(FogSenseError, ValueError):
    """Input violates a documented invariant or precondition."""


class FormatError(FogSenseError, ValueError):
    """File content does not match the documented format."""


class ParameterError(FogSenseError, ValueError):
    """Numeric parameter outside its valid range."""


class AlignmentError(FogSenseError, ValueError):
    """Inputs that must share a clock or length do not."""


class InsufficientDataError(FogSenseError, ValueError):
    """Too few samples, segments or classes for the requested statistic."""


class ConfigError(FogSenseError, ValueError):
    """Invalid run or synthesis configuration."""

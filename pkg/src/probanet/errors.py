"""Exception types shared across the package."""


class ProbanetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ProbanetError, ValueError):
    """Tensor shapes or channel counts do not line up."""


class DomainError(ProbanetError, ValueError):
    """A scalar argument is outside its allowed range."""


class NumericError(ProbanetError, ArithmeticError):
    """A computation produced a non-finite value."""


class ConfigError(ProbanetError, ValueError):
    """A configuration file or value could not be validated."""


class EmptyPoolError(ProbanetError, RuntimeError):
    """The sampler was given no surviving candidates to draw from."""

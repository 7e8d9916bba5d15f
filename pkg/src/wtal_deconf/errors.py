"""Exception types shared across the package."""


class WtalError(Exception):
    """Base class for all package errors."""


class ValidationError(WtalError):
    """Data violates a documented invariant (bad values, dangling refs)."""


class FormatError(WtalError):
    """A binary or text file does not match its declared layout."""


class ConfigurationError(WtalError):
    """A configuration value is out of range or inconsistent."""


class ShapeError(WtalError):
    """Array dimensions do not agree between operands."""


class NumericalError(WtalError):
    """A numerical routine diverged or failed to converge."""

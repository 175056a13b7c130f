class NsyncError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(NsyncError, ValueError):
    """Invalid configuration or input file."""


class NumericalError(NsyncError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

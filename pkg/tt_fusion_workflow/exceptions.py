class FusionError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(FusionError, ValueError):
    """An argument has the wrong shape, range or value."""


class CapacityError(FusionError, ValueError):
    """An operation would materialize more data than its guard allows."""


class FormatError(FusionError, ValueError):
    """A binary container or manifest could not be decoded."""


class NumericError(FusionError, ArithmeticError):
    """A loss or gradient became non-finite.

    Parameters
    ----------
    message : str
        Human readable description.
    name : str, optional
        Name of the offending parameter or head.
    """

    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


class ConfigError(FusionError, ValueError):
    """A run configuration is inconsistent or refers to missing files."""

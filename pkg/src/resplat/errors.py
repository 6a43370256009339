"""Exception types shared across the package."""


class ResplatError(Exception):
    """Base class for package errors."""


class FormatError(ResplatError):
    """A file does not conform to its expected container layout."""


class DataError(ResplatError):
    """A file parsed fine but carries invalid values (NaN, zero quaternion, ...)."""


class NumericError(ResplatError):
    """A numeric routine left its domain of validity (e.g. indefinite covariance)."""


class BackendError(ResplatError):
    """A generator or reconstructor backend failed or is unreachable."""

"""Exception types shared across the package."""


class MeshGmmError(Exception):
    """Base class for every error raised by this package."""


class FormatError(MeshGmmError):
    """A file could not be parsed; the message names the offending line or byte."""


class ValidationError(MeshGmmError):
    """An input violates a documented precondition or invariant."""


class NumericError(MeshGmmError):
    """A numeric operation failed, e.g. a covariance is not positive definite."""

"""Exception types shared across the library.

Every failure mode the package reports deliberately goes through one of
these classes so callers (and the command line front end) can map problems
to outcomes without string matching.
"""


class ShapeError(ValueError):
    """An operation received tensors whose shapes violate its contract."""

    def __init__(self, message: str, *, expected=None, actual=None):
        if expected is not None or actual is not None:
            message = f"{message} (expected {expected}, got {actual})"
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class UsageError(RuntimeError):
    """The API was driven incorrectly: backward on a non-scalar, backward on a
    consumed record, mixed dtypes, a step without gradients, and the like."""


class ConfigError(ValueError):
    """A configuration value breaks a stated invariant; the message names it."""


class ValidationError(ValueError):
    """Input data is malformed: a non-binary mask, a bad manifest line, an
    impossible fold request."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where the computation requires finite ones."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt, truncated, or has an unknown format."""


class GradientCheckError(AssertionError):
    """Analytic and numeric gradients disagree beyond tolerance."""

"""Exception types shared across the package."""


class CduqError(Exception):
    """Base class for package-specific failures."""


class NumericRangeError(CduqError):
    """A numeric operation produced a non-finite value."""


class TrainingDivergedError(NumericRangeError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, step, message=""):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class QuadratureError(NumericRangeError):
    """Adaptive integration failed to reach the requested tolerance."""

    def __init__(self, achieved, requested, message=""):
        self.achieved = achieved
        self.requested = requested
        super().__init__(
            message
            or f"integration reached tolerance {achieved:.3e}, requested {requested:.3e}"
        )


class FormatError(CduqError):
    """An input file does not match the documented format."""


class VerificationError(CduqError):
    """A requested verification (bound check, replay comparison) failed."""

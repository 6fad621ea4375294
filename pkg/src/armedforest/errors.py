"""Exception types shared across the package."""


class ArmedForestError(Exception):
    """Base class for package errors."""


class RejectedParametersError(ArmedForestError, ValueError):
    """Model parameters are invalid (e.g. a covariance that is not positive definite)."""


class SamplerStallError(ArmedForestError, RuntimeError):
    """A rejection sampler exceeded its attempt cap."""


class NumericError(ArmedForestError, ArithmeticError):
    """A quadrature or root search failed to converge."""


class DegenerateBaselineError(ArmedForestError, ValueError):
    """Baseline loss is zero, so relative importance is undefined."""


class ConfigError(ArmedForestError, ValueError):
    """An experiment configuration failed validation.

    ``errors`` holds ``(field_path, message)`` pairs.
    """

    def __init__(self, errors):
        self.errors = list(errors)
        msg = "; ".join(f"{path}: {message}" for path, message in self.errors)
        super().__init__(msg or "invalid configuration")

"""Exception hierarchy shared across the package.

InputError and its subclasses signal bad user input (CLI exit code 1);
everything else raised by the package is a runtime failure (exit code 2).
"""


class EnscopulaError(Exception):
    """Base class for all package errors."""


class InputError(EnscopulaError, ValueError):
    """Invalid data, arguments or file contents supplied by the caller."""


class InsufficientTrainingDataError(InputError):
    """Training window has too few usable cases for the requested fit."""


class UnsupportedSchemeError(InputError):
    """Requested quantization scheme is not defined for the given margin."""


class DegenerateSmoothingError(InputError):
    """Smoothing distribution cannot be fit (zero ensemble spread)."""


class IntegrationError(EnscopulaError, RuntimeError):
    """Numerical quadrature failed to reach the requested tolerance."""


class EnscopulaWarning(UserWarning):
    """Non-fatal degeneracies: clamped values, excluded margins, skipped fits."""

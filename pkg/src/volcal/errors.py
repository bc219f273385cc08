"""Exception types raised across the package."""

from __future__ import annotations


class VolcalError(Exception):
    """Base class for every error raised by volcal."""


class InvalidInput(VolcalError, ValueError):
    pass


class OutOfDomain(InvalidInput):
    """A quote falls outside the unit square after scaling."""


class NegativeInput(InvalidInput):
    pass


class EmptyInput(InvalidInput):
    pass


class DomainError(InvalidInput):
    pass


class DegenerateDensity(VolcalError, ArithmeticError):
    """Dupire formula denominator is (numerically) zero."""


class NegativeVariance(VolcalError, ArithmeticError):
    """Dupire formula numerator is negative."""


class NonFiniteParams(VolcalError, FloatingPointError):
    pass


class NonFiniteGradient(VolcalError, FloatingPointError):
    pass


class DivergedTraining(VolcalError, RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class VolFieldFailure(VolcalError, FloatingPointError):
    pass


class MaturityOutOfRange(InvalidInput):
    pass


class VersionMismatch(VolcalError):
    """A persisted file has the wrong format version or an incompatible layout."""


class MalformedHeader(VolcalError, ValueError):
    pass


class EmptyAfterValidation(VolcalError, ValueError):
    pass


class ReportSchemaError(VolcalError, ValueError):
    pass


class ConfigMismatch(VolcalError, ValueError):
    """Checkpoint and requested market frame disagree."""

"""Exception types shared across the package."""


class HivdynError(Exception):
    """Base class for all package errors."""


class IntegrationError(HivdynError):
    """ODE solver failed (step underflow / persistent negative states)."""


class EquilibriumError(HivdynError):
    """Newton equilibrium search did not converge to a nonnegative root."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SeparationError(HivdynError):
    """Logistic fit diverged (complete or quasi-complete separation)."""


class PositivityError(HivdynError):
    """A treatment-model denominator probability fell below the floor."""


class RankDeficientError(HivdynError):
    """A design matrix is rank deficient; carries the offending column."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class SchemaError(HivdynError):
    """A cohort file violates the visit-table schema."""


class BenchmarkUndefinedError(HivdynError):
    """Counterfactual benchmark requested but no treated patient exists."""


class PinningError(HivdynError):
    """Random effects could not be pinned to the requested baseline."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual

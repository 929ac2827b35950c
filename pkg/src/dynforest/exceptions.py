"""Exception hierarchy shared by the package and mapped to CLI exit codes."""


class DynForestError(Exception):
    """Base class for package errors."""


class DataValidationError(DynForestError, ValueError):
    """Input data or configuration violates a documented invariant."""


class SchemaMismatchError(DataValidationError):
    """A dataset does not match the schema a model was trained with."""


class ModelFormatError(DynForestError, ValueError):
    """A model file has an unknown format or version."""


class NumericalError(DynForestError, ArithmeticError):
    """A numerical procedure could not produce a valid result."""


class LmmFitError(NumericalError):
    """A mixed model could not be fitted at a node."""


class InsufficientDataError(LmmFitError):
    pass


class RankDeficientError(LmmFitError):
    pass


class NonEstimableError(NumericalError):
    """Censoring survival reached zero where a weight is required."""

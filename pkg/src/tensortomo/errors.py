"""Exception and warning types raised across the package."""


class TensorTomoError(Exception):
    """Base class for all package errors."""


class ValidationError(TensorTomoError, ValueError):
    """Invalid user input or parameter."""


class ConfigError(ValidationError):
    """Invalid experiment configuration.  ``path`` is the dotted field path."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DegenerateMetricError(TensorTomoError):
    pass


class NoExitError(TensorTomoError):
    pass


class BlowUpError(TensorTomoError):
    pass


class InvalidProfileError(ValidationError):
    pass


class EmptyLevelError(TensorTomoError):
    pass


class OutOfDomainError(TensorTomoError):
    pass


class RankMismatchError(ValidationError):
    pass


class RankOverflowError(ValidationError):
    pass


class WeightSingularityError(TensorTomoError):
    pass


class InvalidStiffnessError(ValidationError):
    pass


class CoverageError(TensorTomoError):
    def __init__(self, message, starved=None):
        self.starved = starved
        super().__init__(message)


class InsufficientRowsError(TensorTomoError):
    pass


class SymbolRegressionError(TensorTomoError):
    pass


class IllConditionedError(TensorTomoError):
    def __init__(self, message, ritz_min=None):
        self.ritz_min = ritz_min
        super().__init__(message)


class FoliationError(TensorTomoError):
    def __init__(self, message, level=None):
        self.level = level
        super().__init__(message)


class BoundaryContaminationWarning(UserWarning):
    pass


class CoverageWarning(UserWarning):
    pass


class NullSpaceWarning(UserWarning):
    pass

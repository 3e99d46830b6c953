"""Exception types raised across the package."""


class InterOptError(Exception):
    """Base class for all package errors."""


class SchemaError(InterOptError):
    """The feature schema itself is malformed."""


class SchemaMismatchError(InterOptError):
    """Data or model does not line up with the expected schema."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class CSVParseError(InterOptError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DuplicateKeyError(InterOptError):
    pass


class DegenerateFeatureError(InterOptError):
    """A feature has zero variance and cannot be z-scored."""

    def __init__(self, feature):
        super().__init__(f"feature {feature!r} has zero variance")
        self.feature = feature


class TrainTooSmallError(InterOptError):
    pass


class ShapeError(InterOptError, ValueError):
    pass


class DivergenceError(InterOptError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class ModelIntegrityError(InterOptError):
    """A serialized model artifact failed to load or verify."""


class ExactModeCapError(InterOptError):
    def __init__(self, n_features, cap):
        super().__init__(
            f"exact Shapley enumeration supports at most {cap} features, got "
            f"{n_features}; use shapley_sampled (CLI: --sampled N) instead"
        )
        self.n_features = n_features
        self.cap = cap


class NumericalFailure(InterOptError):
    """A linear solve failed even after regularization."""

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number

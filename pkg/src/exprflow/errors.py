"""Exception hierarchy shared by every module."""


class ExprFlowError(Exception):
    """Base class for all package errors."""


class ValidationError(ExprFlowError, ValueError):
    """Input failed a semantic check (unknown label, empty text, bad split...)."""


class ConfigurationError(ValidationError):
    """A configuration object violates its invariants."""


class ShapeError(ValidationError):
    """Array dimensions do not match what the operation expects."""


class DomainError(ValidationError):
    """A numeric argument lies outside the operation's domain."""


class NotFoundError(ExprFlowError, KeyError):
    """A lookup key is missing from an archive."""

    def __str__(self):
        return str(self.args[0]) if self.args else "not found"


class ParseError(ValidationError):
    """A file on disk could not be parsed."""


class StateError(ExprFlowError, RuntimeError):
    """An object is used before it is ready (e.g. an untrained model)."""


class TrainingDivergedError(ExprFlowError, RuntimeError):
    """The loss became non-finite during training."""

    def __init__(self, epoch, message="loss became non-finite"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch

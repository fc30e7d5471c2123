"""Exception types shared across the package."""


class MVAFError(Exception):
    """Base class for all package errors."""


class ShapeError(MVAFError, ValueError):
    """Operand dimensions are incompatible."""


class ContractError(MVAFError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(MVAFError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(MVAFError, ValueError):
    """A binary or text file does not match its declared format."""


class GenerationError(MVAFError):
    """A synthetic scene cannot be generated from the given configuration."""


class SplitError(MVAFError):
    """No train/eval split satisfies the balance constraints."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class EvaluationError(MVAFError):
    """Metrics cannot be computed (e.g. every class falls below minimum support)."""


class TrainingDiverged(MVAFError):
    """The training loss became non-finite."""


class LookupFailure(MVAFError, KeyError):
    """A requested clip, keyframe or person does not exist."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""

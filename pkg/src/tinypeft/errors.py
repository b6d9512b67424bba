"""Exception types shared across the package."""


class TinyPeftError(Exception):
    """Base class for all package errors."""


class DimensionError(TinyPeftError, ValueError):
    """Operand shapes are incompatible."""


class VocabularyError(TinyPeftError, ValueError):
    """A token id falls outside the vocabulary."""


class ConfigurationError(TinyPeftError, ValueError):
    """A config, adapter spec, or task definition is inconsistent."""


class ContractError(TinyPeftError, ValueError):
    """A caller violated an API precondition."""


class RoutingError(TinyPeftError, KeyError):
    """No adapter registered for the requested task."""


class CheckpointError(TinyPeftError, ValueError):
    """A checkpoint file is truncated, corrupt, or version-incompatible."""


class VerificationError(TinyPeftError, ValueError):
    """A generated dataset disagrees with its own labeling rule."""


class DivergenceError(TinyPeftError, RuntimeError):
    """Training hit NaN or runaway loss.

    Carries the partial training report so callers can persist it.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report

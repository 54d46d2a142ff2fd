"""Exception hierarchy shared by every coswin module."""


class CoSwinError(Exception):
    """Base class for all package errors."""


class ShapeError(CoSwinError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CoSwinError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(CoSwinError, ValueError):
    """A configuration record is invalid or inconsistent."""


class PrecisionError(CoSwinError, TypeError):
    """Tensors of different scalar precision met in one graph."""


class NonFiniteError(CoSwinError, FloatingPointError):
    """A forward operation produced NaN or Inf."""


class FormatError(CoSwinError, ValueError):
    """An on-disk file does not match its declared binary layout."""


class DataError(CoSwinError, ValueError):
    """Dataset contents are inconsistent (bad labels, mismatched counts)."""


class TrainingError(CoSwinError, RuntimeError):
    """Optimization diverged or hit an unrecoverable state."""


class CheckpointError(FormatError):
    """A checkpoint is malformed or does not fit the model it describes."""

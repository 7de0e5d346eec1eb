"""Exception hierarchy shared by every cfmkit module."""


class CfmError(Exception):
    """Base class for all library errors."""


class DimensionError(CfmError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(CfmError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(CfmError, RuntimeError):
    """A call violated an API precondition (e.g. backward on a non-scalar)."""


class DomainError(CfmError, ValueError):
    """An argument lies outside the mathematical domain of the function."""


class ConfigError(CfmError, ValueError):
    """Invalid configuration value."""


class CheckpointError(CfmError, IOError):
    """Checkpoint file is malformed, truncated, or fails its checksum."""


class TrainingDivergedError(NumericError):
    """Training produced non-finite values; carries stage/epoch/step context."""

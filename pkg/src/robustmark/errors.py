"""Shared exception types."""


class DimensionError(ValueError):
    """Tensor shapes or message lengths do not match the expected contract."""


class ParameterError(ValueError):
    """Attack or operation parameter outside its valid range."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class ConfigError(ValueError):
    """Invalid, unknown, or ill-typed configuration key."""


class CheckpointFormatError(IOError):
    """Checkpoint file is corrupt, truncated, or has a bad magic/version."""


class TrainingError(RuntimeError):
    """A training loop failed to converge or diverged."""


class AttackInfeasibleError(RuntimeError):
    """A constructive attack could not establish its invariant."""

"""Exception types shared across the package."""


class PlatError(Exception):
    """Base class for all package errors."""


class DimensionError(PlatError, ValueError):
    """Tensor or vector shapes do not conform to an operation's rule."""


class NumericError(PlatError, ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


class ContractError(PlatError, RuntimeError):
    """A documented precondition was violated by the caller."""


class CapacityError(PlatError, ValueError):
    """A sequence would exceed the backbone's maximum length."""


class ConfigError(PlatError, ValueError):
    """Invalid configuration value or key."""


class DependencyError(PlatError, FileNotFoundError):
    """A pipeline stage is missing an artifact produced by an earlier stage."""


class CheckpointError(PlatError, IOError):
    """Checkpoint file is corrupt, truncated or has an unsupported version."""


class FrozenParameterError(PlatError, RuntimeError):
    """A parameter in the frozen set changed across an update."""

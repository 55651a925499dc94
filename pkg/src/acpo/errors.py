"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid hyperparameter or configuration value."""


class ShapeError(ValueError):
    """A primitive received operands with incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf from finite inputs."""


class InvariantError(RuntimeError):
    """A frozen tensor changed, or another hard invariant was breached."""


class DependencyError(RuntimeError):
    """An upstream artifact (checkpoint) required by a command is missing."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""

    code = "checkpoint"


class CheckpointVersionError(CheckpointError):
    code = "version"


class CheckpointKindError(CheckpointError):
    code = "kind"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"


class CheckpointCorruptError(CheckpointError):
    code = "corrupt"


class ArchitectureMismatchError(CheckpointError):
    code = "architecture"

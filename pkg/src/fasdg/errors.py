"""Exception hierarchy. CLI exit codes: ConfigError -> 2, DataError -> 3, NumericalError -> 4."""


class ConfigError(ValueError):
    """Invalid configuration value, unknown config key, or bad hyperparameter."""


class ProtocolError(ConfigError):
    """Protocol-level misuse, e.g. fewer than two source domains or target among sources."""


class ShapeError(ValueError):
    """Tensor operands have incompatible shapes or dtypes; message names both."""


class NumericalError(RuntimeError):
    """Non-finite values encountered, or a gradient check failed."""


class DataError(RuntimeError):
    """Dataset ingestion, composition, or scoring input problem."""


class CompositionError(DataError):
    """Mismatched sources handed to the mixer."""


class MetricError(DataError):
    """Score set unusable for the requested metric, e.g. an empty class."""


class CheckpointError(DataError):
    """Base for checkpoint file problems."""


class CheckpointVersionError(CheckpointError):
    """Unsupported checkpoint format version."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint payload shorter than its header declares."""


class CheckpointShapeError(CheckpointError):
    """Stored tensor does not match the expected name, shape, or dtype."""

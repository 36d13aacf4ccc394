"""Exception types shared across the package."""


class ProtodiffError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(ProtodiffError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ProtodiffError, ValueError):
    """Invalid configuration value or combination."""


class NumericalDomainError(ProtodiffError, ValueError):
    """Input lies outside the numerical domain of an operation (e.g. zero norm)."""


class TrainingError(ProtodiffError, RuntimeError):
    """Training aborted, e.g. on a non-finite gradient or loss."""


class FormatError(ProtodiffError, ValueError):
    """Malformed file: bad magic, version, or structure."""


class CorruptionError(FormatError):
    """Checksum mismatch or truncated payload."""


class DataValidationError(ProtodiffError, ValueError):
    """Record content violates dataset invariants."""


class MetricUndefinedError(ProtodiffError, ValueError):
    """Metric is undefined for the given inputs (e.g. single-class labels)."""


class CheckpointVersionError(ProtodiffError, ValueError):
    """Checkpoint parameter names do not match the model being loaded."""

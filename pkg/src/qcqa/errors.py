"""Exception hierarchy shared by every qcqa module."""


class QcqaError(Exception):
    """Base class for all errors raised by this package."""


class EncodingError(QcqaError):
    """A genome (label vector or permutation) violates its encoding."""


class PartitionError(QcqaError):
    """A head grouping is not a valid partition of ``{0..H-1}``."""


class ShapeError(QcqaError):
    """Weight or feature tensors have incompatible shapes."""


class ConfigError(QcqaError):
    """Invalid search/run configuration (e.g. P does not divide H)."""


class PlanError(QcqaError):
    """A model plan does not match the archive it is applied to."""


class BudgetExceededError(QcqaError):
    """Exhaustive enumeration would exceed the configured budget."""


class NumericError(QcqaError):
    """Non-finite values encountered in numerical inputs."""


class EvaluationError(QcqaError):
    """A fitness evaluation failed inside the evolutionary loop."""


class FormatError(QcqaError):
    """A file on disk does not follow its declared format."""

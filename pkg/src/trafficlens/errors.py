"""Exception and warning types shared across the toolkit.

The four direct subclasses of :class:`TrafficLensError` map onto CLI exit
codes: ConfigError -> 2, DataError -> 3, NumericError -> 4,
DependencyError -> 5.
"""


class TrafficLensError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TrafficLensError):
    """Invalid configuration, hyperparameters, or call arguments."""


class DataError(TrafficLensError):
    """Input data violates a contract (bad CSV, degenerate table, bad file)."""


class NumericError(TrafficLensError):
    """Non-finite values or numerically undefined results."""


class DependencyError(TrafficLensError):
    """A required upstream artifact is missing."""


class SchemaError(DataError):
    """CSV/schema mismatch, such as a missing label column."""


class ParseError(DataError):
    """Malformed CSV content (inconsistent row widths and similar)."""


class DegenerateDatasetError(DataError):
    """Nothing usable left after cleaning."""


class FormatError(DataError):
    """Binary container is corrupt or has the wrong magic/version."""


class StatisticsError(DataError):
    """Inconsistent column statistics (for example min > max)."""


class ShapeError(NumericError):
    """Tensor shape does not match a layer contract."""


class ContractError(TrafficLensError):
    """An API was called out of order (for example backward without forward)."""


class UndefinedMetricError(NumericError):
    """A statistic is undefined for this confusion matrix (zero denominator)."""


class PartitionError(ConfigError):
    """Region labelling does not partition the pixel grid."""


class InsufficientSamplingError(ConfigError):
    """Coalition budget too small for the requested number of regions."""


class BenchError(TrafficLensError):
    """Benchmark harness misuse (empty test set, too few trials)."""


class ConsistencyError(DataError):
    """Cross-artifact identifiers disagree (for example model name sets)."""


class TrafficLensWarning(UserWarning):
    """Non-fatal degenerate input handled by a documented convention."""

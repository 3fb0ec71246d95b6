"""Exception hierarchy. CLI exit codes map onto these categories:
0 success, 1 assertion/acceptance failure, 2 usage/config error, 3 data error."""


class DglstmError(Exception):
    """Base class for all toolkit errors."""


class StructuralError(DglstmError):
    """Shape or cache mismatch between arrays that must agree."""


class NumericError(DglstmError):
    """Non-finite value (NaN/Inf) where a finite number is required."""


class ConfigError(DglstmError):
    """Invalid configuration or invalid use of an operation for a variant."""


class DataError(DglstmError):
    """Problem with ingested data (missing file, bad cell, short series...)."""


class FormatError(DataError):
    """Malformed or truncated model/report file."""


class DegenerateStatsError(DataError):
    """Statistic undefined for the given inputs (zero variance, single class)."""

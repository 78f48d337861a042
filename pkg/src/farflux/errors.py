"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class FarError(Exception):
    """Base class for all farflux errors."""


class ConfigError(FarError):
    """Invalid or inconsistent configuration (bad schema, unknown keys)."""


class DataError(FarError):
    """Invalid input data: missing fields, bad values, broken files."""


class ShapeError(DataError):
    """Array dimensions inconsistent with the model or grid contract."""


class UndefinedMetricError(DataError):
    """Metric has no defined value (e.g. zero target variance for R^2)."""


class NumericError(FarError):
    """Non-finite values where finite ones are required (divergence, bad grads)."""


class DegenerateFootprintError(NumericError):
    """Analytic footprint had no mass left on the grid after discretization."""

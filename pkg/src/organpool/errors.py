"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class EngineError(Exception):
    """Base class for all package errors."""


class ConfigError(EngineError):
    """Invalid or inconsistent configuration."""


class SchemaError(ConfigError):
    """Label schema violates its own contracts (coverage, references)."""


class DataError(EngineError):
    """Invalid input data: files, records, grids, targets."""


class GeometryError(DataError):
    """Lattice/volume geometry violation (bounds, shape mismatch)."""


class NumericError(EngineError):
    """A numeric verification failed (gradient check, invariant breach)."""

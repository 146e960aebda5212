"""Exception hierarchy shared across the pipeline.

Each class carries the CLI exit code it maps to.
"""


class WaitPredError(Exception):
    exit_code = 4


class ConfigError(WaitPredError, ValueError):
    exit_code = 2


class DataError(WaitPredError, ValueError):
    exit_code = 3


class SchemaError(DataError):
    """Input table lacks required columns."""


class OutOfBounds(DataError):
    """A point or region id falls outside the configured grid."""


class ModelError(DataError):
    """Serialized model is malformed, of the wrong version, or mismatched."""

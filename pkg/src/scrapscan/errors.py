"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters for anything reachable from a command line entry point.
"""


class ScrapScanError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(ScrapScanError):
    """Invalid or inconsistent configuration (exit code 2)."""


class DataError(ScrapScanError):
    """Bad input data: labels out of range, missing files, corrupt formats (exit code 3)."""


class ShapeError(DataError):
    """Tensor shape mismatch; message names the offending shapes."""


class NumericError(ScrapScanError):
    """Numerical contract violation: NaN activations, degenerate norms (exit code 4)."""


class CheckpointFormatError(DataError):
    """Checkpoint file failed magic/version/length validation."""


class GenerationError(DataError):
    """Scene generation could not satisfy its constraints."""


class UndefinedMetricError(DataError):
    """Metric is undefined for the given inputs (e.g. single-class labels)."""

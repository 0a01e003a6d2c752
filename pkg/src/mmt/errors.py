"""Exception types shared across the package.

ConfigError maps to CLI exit code 1, everything else to exit code 2.
"""


class MMTError(Exception):
    """Base class for all package errors."""


class ConfigError(MMTError):
    """Invalid configuration value, flag combination, or missing artifact."""


class ShapeError(MMTError):
    """Operand shapes are incompatible."""


class NumericError(MMTError):
    """Non-finite values or otherwise unusable numerics."""


class SamplingError(MMTError):
    """Batch sampling cannot satisfy its class/instance requirements."""


class MiningError(MMTError):
    """A batch does not admit hardest positive/negative mining."""


class ClusteringError(MMTError):
    """Clustering preconditions violated."""


class EvalError(MMTError):
    """Evaluation inputs are unusable (empty gallery, no relevant items...)."""

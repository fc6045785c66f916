"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes (2 config, 3 numerical, 4 I/O).
"""


class BoltzformerError(Exception):
    pass


class ConfigError(BoltzformerError, ValueError):
    """Bad shapes, unknown keys, out-of-range settings."""


class NumericalError(BoltzformerError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DegenerateDistributionError(NumericalError):
    """A probability field with no mass to normalize."""


class EmptyAttentionSetError(BoltzformerError, ValueError):
    """Softmax requested over an empty index set."""

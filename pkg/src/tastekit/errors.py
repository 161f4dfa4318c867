"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, malformed
data files exit 3 and numerical failures (divergence, non-finite values,
degenerate estimators) exit 4.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad option values, missing presets, bad routes."""


class DataFormatError(ValueError):
    """A data or checkpoint file could not be parsed."""


class NumericalError(RuntimeError):
    """A numerical procedure failed: divergence, non-finite values, low ESS."""

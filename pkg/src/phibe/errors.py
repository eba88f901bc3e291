"""Exception types shared across the package.

Two buckets: bad input (configs, shapes, parameter ranges) and numerical
failures discovered while solving (instability, singular systems, blow-ups).
The CLI maps them to distinct exit codes.
"""


class ConfigError(ValueError):
    """Invalid configuration or argument: wrong key, shape, range, or type."""


class NumericalError(RuntimeError):
    """A solve failed: unstable system, singular matrix, or divergence."""

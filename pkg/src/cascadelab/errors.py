"""Semantic exception hierarchy.

Callers (and the CLI exit-code mapping) distinguish configuration mistakes
from runtime failures, so public functions raise these instead of bare
ValueError.
"""


class CascadeLabError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CascadeLabError, ValueError):
    """A config, spec, or argument violates its documented invariants."""


class DomainError(CascadeLabError, ValueError):
    """A numeric argument is outside the mathematical domain of an operation."""


class DimensionError(CascadeLabError, ValueError):
    """Feature/parameter dimensions do not line up."""


class DegenerateDataError(CascadeLabError, ArithmeticError):
    """An evaluation set is unusable (zero denominator, base rate 0 or 1)."""


class DivergenceError(CascadeLabError, ArithmeticError):
    """Training produced a non-finite loss (learning rate misconfiguration)."""

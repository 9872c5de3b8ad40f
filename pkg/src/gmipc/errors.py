"""Semantic exception hierarchy.

Public functions raise these instead of bare ValueError so callers can
distinguish contract violations from ordinary bugs.
"""


class GmipcError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(GmipcError, ValueError):
    """A scalar argument lies outside its mathematical domain."""


class InvariantViolation(GmipcError, ValueError):
    """A structured value violates one of its declared invariants."""


class ArgumentError(GmipcError, ValueError):
    """An argument is structurally unusable (e.g. an empty point set)."""


class UndefinedMetricError(GmipcError, ValueError):
    """A metric is requested on inputs for which it is not defined."""


class ScenarioGenerationError(GmipcError, RuntimeError):
    """Randomized scenario placement failed within its rejection budget."""


class ConfigError(GmipcError, ValueError):
    """A run configuration file or flag set is malformed."""

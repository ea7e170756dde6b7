"""Shared exception types."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its preconditions."""


class PhaseError(ContractViolation):
    """A belief operation was applied in the wrong predict/update phase."""


class NumericalFailure(RuntimeError):
    """A linear-algebra step failed beyond the jitter/fallback policy."""


class ImpossibleEvidence(ValueError):
    """A Bayes update was asked to condition on a zero-probability outcome."""


class ConfigError(ValueError):
    """A run configuration file or flag set is invalid."""

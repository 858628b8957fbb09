"""Exception taxonomy shared across the package."""


class BevLabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BevLabError):
    """Bad shapes, mismatched channel counts, or invalid hyperparameters."""


class DomainError(BevLabError, ValueError):
    """An operation was asked for a value outside its mathematical domain."""


class NumericalError(BevLabError):
    """Non-finite values encountered where finite ones are required."""


class GenerationError(BevLabError):
    """Synthetic data generation could not satisfy its constraints."""


class TrainingError(BevLabError):
    """Training or refinement diverged (non-finite loss)."""

"""Exception hierarchy shared across the package."""


class ExciterError(Exception):
    """Base class for all package errors."""


class DimensionError(ExciterError, ValueError):
    """Shapes of inputs do not agree."""


class DomainError(ExciterError, ValueError):
    """An input lies outside the domain of an operation (NaN, negative step, ...)."""


class StabilityError(ExciterError):
    """The model or matrix fails a stability requirement."""

    def __init__(self, message, gamma_max=None):
        super().__init__(message)
        self.gamma_max = gamma_max


class IntegrationError(ExciterError):
    """A numerical integration produced a non-finite state."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class SimulationError(ExciterError):
    """The thinning simulator could not produce a valid path."""


class UnsupportedConfigurationError(ExciterError):
    """The requested analysis does not apply to this model configuration."""


class FitError(ExciterError):
    """Maximum likelihood fitting failed to produce any usable estimate."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FormatError(ExciterError, ValueError):
    """An input file could not be parsed."""


class InsufficientDataError(ExciterError, ValueError):
    """Too few usable rows to proceed."""

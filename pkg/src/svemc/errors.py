"""Exception types shared across the package."""


class SvemcError(Exception):
    """Base class for all package-specific errors."""


class LevelUnderflowError(SvemcError):
    """Raised when an operation needs a coarser level than level 0."""


class DegenerateVarianceError(SvemcError):
    """Observation density variance is exactly zero (|rho| = 1 or an all-zero
    volatility segment); signals invalid parameters rather than bad luck."""


class FilterCollapseError(SvemcError):
    """All particle weights vanished at some observation time."""

    def __init__(self, t: int, message: str | None = None):
        self.t = t
        super().__init__(message or f"all particle weights vanished at t={t}")


class DegenerateWeightError(SvemcError):
    """A coupling weight underflowed below the representable double range."""


class DegenerateDenominatorError(SvemcError):
    """A self-normalizing weight sum is numerically zero."""


class InsufficientDataError(SvemcError):
    """Not enough samples or grid points for the requested computation."""


class ConfigError(SvemcError):
    """Invalid, unknown, or out-of-range run configuration entry."""


class DataSchemaError(SvemcError):
    """An input data file violates the expected schema."""

"""Exception types shared across the package."""


class SoilMpcError(Exception):
    """Base class for all package errors."""


class ConfigError(SoilMpcError):
    """Invalid configuration, preset, or input file."""


class NonConvergence(SoilMpcError):
    """The implicit soil-moisture step failed even after time-step halving.

    Carries the simulation day (float, days) at which the failure occurred
    when raised from a multi-day run.
    """

    def __init__(self, message, day=None):
        super().__init__(message if day is None else f"{message} (at day {day:g})")
        self.day = day


class DepthNotOnGrid(SoilMpcError):
    """Requested sensor depth does not coincide with a column node."""


class InsufficientData(SoilMpcError):
    """Too few daily records to build even one training window."""


class ShapeMismatch(SoilMpcError):
    """Array shape inconsistent with the model's lag or channel layout."""


class Diverged(SoilMpcError):
    """Training loss became non-finite."""


class HorizonTooLong(SoilMpcError):
    """Exact solve requested for a horizon above the enumeration cap."""


class IndivisibleHorizon(SoilMpcError):
    """Large-scale spatial mode requires the horizon to split into whole cycles."""


class ForecastExhausted(SoilMpcError):
    """Closed-loop run needs weather beyond the supplied series."""

"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes, so new error types should
subclass one of the four categories below rather than Exception.
"""


class RibbonRacerError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(RibbonRacerError):
    """Bad input data: malformed files, violated track invariants, bad configs."""


class TrackFormatError(ValidationError):
    """Track file does not follow the CSV + meta.json format."""


class TrackInvariantError(ValidationError):
    """Track data violates a geometric invariant (grid, widths, bounds, closure)."""


class AngleBoundError(TrackInvariantError):
    """Integrated slope or banking left the small-angle validity region."""


class PoseSingularityError(ValidationError):
    """Curvilinear projection broke down (1 - n*kappa <= 0)."""


class FitError(RibbonRacerError):
    """Model identification failed (insufficient excitation, empty bins, ...)."""


class SolverError(RibbonRacerError):
    """Optimization failed in a way that has no usable fallback."""


class SimulationError(RibbonRacerError):
    """Closed-loop run aborted (off-track, spin, persistent planner failure)."""

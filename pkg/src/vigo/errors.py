"""Exception types shared across the planner and simulator."""


class VigoError(Exception):
    """Base class for all package errors."""


class MapBoundsError(VigoError):
    """A point that must lie inside the voxel grid does not."""


class ValidationError(VigoError):
    """A scenario or config file violates its schema; message names the key."""


class PlanningError(VigoError):
    """Unrecoverable planning state (e.g. start or goal inside an obstacle)."""


class PathSearchError(VigoError):
    """Local grid search exhausted its search box without reaching the goal."""


class NumericError(VigoError):
    """A cost term produced a non-finite value; message names the component."""

"""Exception types shared across the package."""


class HandLiftError(Exception):
    """Base class for all package errors."""


class BehindCamera(HandLiftError):
    """Point has non-positive depth in the camera frame."""


class DegenerateGeometry(HandLiftError):
    """Camera pair too close together to triangulate."""


class CheiralityViolation(HandLiftError):
    """Triangulated point lies behind one of the cameras."""


class InsufficientViews(HandLiftError):
    """Fewer than two usable observations for triangulation."""


class Incomparable(HandLiftError):
    """Two poses share no finite joints, so no distance exists."""


class ConfigError(HandLiftError):
    """Inconsistent or incomplete run configuration."""


class OverrideError(HandLiftError):
    """Manual override references unknown or conflicting entities."""


class EmptyEvaluation(HandLiftError):
    """Metric requested over an empty set of matches."""


class FormatError(HandLiftError):
    """Malformed input file; carries the offending location."""


class OrderingError(FormatError):
    """Frame records appear out of order in a detection stream."""

"""Exception hierarchy shared by all geoflow modules."""


class GeoflowError(Exception):
    """Base class for every error raised by geoflow."""


class PointOutsideChartError(GeoflowError):
    pass


class NonPositiveDefiniteError(GeoflowError):
    """Metric tensor failed the det > 0, E > 0 test."""


class BoundaryProximityError(GeoflowError):
    """Point too close to a chart boundary for finite differencing."""


class InvalidMetricError(GeoflowError):
    pass


class StepSizeUnderflowError(GeoflowError):
    pass


class ToleranceNotAchievedError(GeoflowError):
    pass


class ResolutionTooCoarseError(GeoflowError):
    """Refined shooting solutions collided ambiguously."""


class DegenerateTargetError(GeoflowError):
    """Target point conjugate to the source along some arc."""


class MeshTooCoarseError(GeoflowError):
    pass


class PoleEncounteredError(GeoflowError):
    pass


class OutsideValidityStripError(GeoflowError):
    pass


class ConfigError(GeoflowError):
    pass


def error_code(exc: BaseException) -> str:
    """Kebab-case name of an error class, e.g. ``non-positive-definite``."""
    import re

    name = type(exc).__name__.removesuffix("Error")
    return re.sub(r"(?<!^)(?=[A-Z])", "-", name).lower()

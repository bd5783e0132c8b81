"""Exception hierarchy shared across the package."""


class EvflowError(Exception):
    """Base class for all evflow errors."""


class EventParseError(EvflowError):
    """An event file could not be parsed (carries line / record context)."""


class GeometryError(EvflowError):
    """A coordinate or map does not fit the declared camera geometry."""


class DimensionMismatchError(EvflowError):
    """Embedding / weight / feature dimensions do not agree."""


class EmptyNeighborhoodError(EvflowError):
    """A query event has no events in its spatiotemporal neighborhood."""


class BenchResolutionError(EvflowError):
    """A benchmark workload is too small for the timer resolution."""


class TrainingDivergedError(EvflowError):
    """Training produced a non-finite loss."""

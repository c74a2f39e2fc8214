"""Exception taxonomy shared by every convforge module."""


class ConvforgeError(Exception):
    """Base class for all library errors."""


class ShapeError(ConvforgeError, ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ArgumentError(ConvforgeError, ValueError):
    """A non-shape argument is out of its documented range."""


class GeometryError(ConvforgeError, ValueError):
    """Spatial geometry is inconsistent (non-integral output size, crop larger than source, ...)."""


class StateError(ConvforgeError, RuntimeError):
    """An object is in the wrong state for the call (missing/consumed cache, wrong model mode)."""


class StepError(ConvforgeError, RuntimeError):
    """A training or optimizer step failed (non-finite gradient or loss)."""


class ConfigError(ConvforgeError, ValueError):
    """A run configuration is invalid or unsatisfiable."""


class UndefinedMetricError(ConvforgeError, ValueError):
    """The requested metric is undefined for the given inputs (e.g. single-class AUC)."""


class PgmParseError(ConvforgeError, ValueError):
    """Malformed portable graymap input. Carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class CheckpointError(ConvforgeError, ValueError):
    """Malformed or inconsistent checkpoint file."""

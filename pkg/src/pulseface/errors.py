"""Exception types shared across pulseface.

Every error derives from ``PulsefaceError`` and from the closest builtin, so
callers that only know about ``ValueError`` keep working.
"""


class PulsefaceError(Exception):
    """Base class for all pulseface errors."""


class RangeError(PulsefaceError, ValueError):
    """A parameter is outside its valid range."""


class SignalLengthError(PulsefaceError, ValueError):
    """An input signal is too short for the requested operation."""


class NoSignalError(PulsefaceError, ValueError):
    """An input carries no usable signal (all masked or zero variance)."""


class ShapeError(PulsefaceError, ValueError):
    """Tensor shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class DegenerateBatchError(PulsefaceError, ValueError):
    """A batch or label set cannot produce a meaningful loss."""


class NumericalError(PulsefaceError, ArithmeticError):
    """A computation produced NaN or Inf."""


class FormatError(PulsefaceError, ValueError):
    """A binary container or checkpoint is malformed."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class ManifestError(PulsefaceError, ValueError):
    """A manifest violates one of the named integrity rules."""

    def __init__(self, rule: str, message: str):
        self.rule = rule
        super().__init__(f"[{rule}] {message}")


class ReconstructionRefused(PulsefaceError):
    """A reconstructor declined to fill a gap (insufficient context)."""


# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def exit_code_for(exc: BaseException) -> int:
    """Map an exception raised by a pipeline stage to a CLI exit code."""
    if isinstance(exc, (NumericalError, DegenerateBatchError, ArithmeticError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (PulsefaceError, FileNotFoundError, OSError, ValueError)):
        return EXIT_DATA
    return EXIT_USAGE

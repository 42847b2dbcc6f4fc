"""Exception and warning types raised by the lowering toolchain."""


class QlowerError(Exception):
    """Base class for every error raised by this package."""


class OutOfRangeError(QlowerError):
    pass


class IntegerOverflowError(QlowerError, OverflowError):
    """An integer operation left the signed 64-bit range."""


class KindMismatchError(QlowerError):
    pass


class ShapeMismatchError(QlowerError):
    pass


class ParseError(QlowerError):
    def __init__(self, message, *, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


class MissingBlobError(QlowerError):
    pass


class NonCanonicalError(QlowerError):
    pass


class PassOrderError(QlowerError):
    """A pass was applied to a graph at the wrong stage of the pipeline."""


class NotCalibratedError(QlowerError):
    pass


class EmptyCalibrationSetError(QlowerError):
    pass


class NotFoldableError(QlowerError):
    pass


class NoLeadingLinearError(QlowerError):
    pass


class MissingQuantParamsError(QlowerError):
    pass


class OverflowUnsatisfiableError(QlowerError):
    pass


class NonMonotoneThresholdsError(QlowerError):
    pass


class ThresholdTableError(QlowerError):
    """Threshold table requested for an activation with too many levels."""


class GraphMismatchError(QlowerError):
    pass


class UnknownNodeError(QlowerError):
    pass


class UnsupportedOpError(QlowerError):
    pass


class LambdaUnderflowWarning(UserWarning):
    """The D=1 requantization of a BN offset truncated it to zero."""


class DegenerateCalibrationWarning(UserWarning):
    """An activation never fired during calibration."""

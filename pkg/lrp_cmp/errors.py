class LrpError(Exception):
    """Base class for every error raised by lrp_cmp."""


class MissingFile(LrpError, FileNotFoundError):
    pass


class IoFailure(LrpError, OSError):
    pass


class MalformedDocument(LrpError, ValueError):
    pass


class MissingField(MalformedDocument):
    pass


class UnknownLayerType(MalformedDocument):
    pass


class ChecksumMismatch(MalformedDocument):
    pass


class MalformedAttribution(MalformedDocument):
    pass


class NonFiniteValue(LrpError, ValueError):
    pass


class NonFiniteWeight(NonFiniteValue):
    pass


class ShapeMismatch(LrpError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class IndexOutOfRange(LrpError, IndexError):
    pass


class NonPositiveEpsilon(LrpError, ValueError):
    pass


class InvalidAlpha(LrpError, ValueError):
    pass


class BoundsViolation(LrpError, ValueError):
    pass


class UnsupportedLayer(LrpError, TypeError):
    pass


class NotFirstLayer(LrpError, ValueError):
    pass


class InvalidAssignment(LrpError, ValueError):
    def __init__(self, layer_index: int | None, reason: str):
        self.layer_index = layer_index
        self.reason = reason
        where = "config" if layer_index is None else f"layer {layer_index}"
        super().__init__(f"Invalid rule assignment for {where}: {reason}")


class NoBoxForClass(LrpError, ValueError):
    pass


class DegenerateBox(LrpError, ValueError):
    pass


class EmptyInput(LrpError, ValueError):
    pass


class TargetLargerThanImage(LrpError, ValueError):
    pass


class StaleResults(LrpError, ValueError):
    """Existing output files were produced by a different model, analyzer or preprocessing."""

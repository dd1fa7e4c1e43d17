"""Exception hierarchy shared by every camkit module."""


class CamError(Exception):
    """Base class for all camkit errors."""


class DimensionError(CamError, ValueError):
    """Tensor shapes disagree with what an operation requires."""


class ConsistencyError(CamError, RuntimeError):
    """Internal bookkeeping (e.g. pooling indices) is inconsistent."""


class FormatError(CamError, ValueError):
    """A binary file does not follow its container layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ModelFormatError(FormatError):
    pass


class TensorFormatError(FormatError):
    pass


class ImageFormatError(FormatError):
    pass


class UnsupportedKindError(CamError, ValueError):
    def __init__(self, kind):
        super().__init__(f"unsupported layer kind {kind!r}")
        self.kind = kind


class GraphError(CamError, ValueError):
    """Structural problem in a model graph (duplicates, cycles, bad wiring)."""


class WeightShapeError(GraphError):
    pass


class UnknownLayerError(CamError, KeyError):
    def __str__(self):
        return str(self.args[0])


class LayerCapabilityError(CamError, ValueError):
    """The requested layer cannot be projected back onto the input."""


class ReachabilityError(CamError, ValueError):
    pass


class ClassSpecError(CamError, ValueError):
    pass


class MetricError(CamError, ValueError):
    pass


class MaskError(CamError, ValueError):
    pass

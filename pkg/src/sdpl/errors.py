"""Exception hierarchy shared by every sdpl module."""


class SdplError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(SdplError, ValueError):
    pass


class DomainError(SdplError, ValueError):
    pass


class NonFiniteError(SdplError, FloatingPointError):
    pass


class NotScalar(SdplError, ValueError):
    pass


class DetachedGraph(SdplError, RuntimeError):
    pass


class StaleGraph(SdplError, RuntimeError):
    pass


class InvalidCount(SdplError, ValueError):
    pass


class InvalidLayout(SdplError, ValueError):
    pass


class IndexOutOfRange(SdplError, IndexError):
    pass


class OffsetExceedsThreshold(SdplError, ValueError):
    pass


class EmptyMask(SdplError, ValueError):
    pass


class CardinalityMismatch(SdplError, ValueError):
    pass


class BatchNormUninitialized(SdplError, RuntimeError):
    pass


class LabelOutOfRange(SdplError, ValueError):
    pass


class ConfigMismatch(SdplError, ValueError):
    pass


class InvalidScale(SdplError, ValueError):
    pass


class DimensionMismatch(SdplError, ValueError):
    pass


class EmptyGallery(SdplError, ValueError):
    pass


class NoRelevantItem(SdplError, ValueError):
    pass


class PadTooLarge(SdplError, ValueError):
    pass


class MalformedImage(SdplError, ValueError):
    pass


class InconsistentViewStructure(SdplError, ValueError):
    pass


class CorruptCheckpoint(SdplError, ValueError):
    pass


class VersionMismatch(SdplError, ValueError):
    pass


class SchemaMismatch(SdplError, ValueError):
    pass


class UsageError(SdplError, ValueError):
    pass

"""Exception hierarchy shared by every module."""


class RLSMergeError(Exception):
    """Base class for all library errors."""


class ShapeError(RLSMergeError, ValueError):
    """Operands have incompatible shapes."""


class NumericalError(RLSMergeError, ValueError):
    """Input violates a numerical precondition (non-finite, asymmetric, not PSD)."""


class ZeroNormError(NumericalError):
    """A vector whose direction is required has (near) zero norm."""


class StoreError(RLSMergeError):
    """Base class for persistence failures."""


class VersionError(StoreError):
    pass


class ChecksumError(StoreError):
    pass


class TruncatedBlobError(StoreError):
    pass


class UnknownKindError(StoreError):
    pass

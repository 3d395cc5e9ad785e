"""Exception types shared across the package."""


class SiamRelocError(Exception):
    """Base class for all errors raised by this package."""


class ZeroNormQuaternion(SiamRelocError, ValueError):
    pass


class ShapeMismatch(SiamRelocError, ValueError):
    pass


class NonFiniteValue(SiamRelocError, FloatingPointError):
    pass


class NotScalarLoss(SiamRelocError, ValueError):
    pass


class MissingHead(SiamRelocError, ValueError):
    pass


class MalformedPoseFile(SiamRelocError, ValueError):
    pass


class MalformedLine(SiamRelocError, ValueError):
    pass


class NonOrthogonalRotation(SiamRelocError, ValueError):
    pass


class SequenceTooShort(SiamRelocError, ValueError):
    pass


class InfeasibleAliasing(SiamRelocError, ValueError):
    pass


class DivergedLoss(SiamRelocError, FloatingPointError):
    pass


class EmptyTestSplit(SiamRelocError, ValueError):
    pass


class ConfigError(SiamRelocError, ValueError):
    pass

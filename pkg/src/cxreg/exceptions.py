"""Exception types raised across the package."""


class CxregError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(CxregError, ValueError):
    pass


class LabelSetMismatch(CxregError, ValueError):
    pass


class EmptyMask(CxregError, ValueError):
    pass


class TooSmall(CxregError, ValueError):
    pass


class EmptyCorpus(CxregError, ValueError):
    pass


class NonFiniteLoss(CxregError, FloatingPointError):
    pass


class GeometryOverflow(CxregError, ValueError):
    pass


class DegenerateMatrix(CxregError, ValueError):
    pass


class UnsupportedAlpha(CxregError, ValueError):
    pass


class AllZeroDifferences(CxregError, ValueError):
    pass


class NonMonotoneControlPoints(CxregError, ValueError):
    pass

class GnnuqError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(GnnuqError, ValueError):
    pass


class NonScalarLoss(GnnuqError, ValueError):
    pass


class NonPositiveVariance(GnnuqError, ValueError):
    pass


class LengthMismatch(GnnuqError, ValueError):
    pass


class GeneOutOfRange(GnnuqError, ValueError):
    pass


class MalformedJson(GnnuqError, ValueError):
    pass


class VersionMismatch(GnnuqError, ValueError):
    pass

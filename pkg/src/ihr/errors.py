"""Exception hierarchy shared across the package."""


class IHRError(Exception):
    pass


class ShapeMismatch(IHRError, ValueError):
    pass


class NotPositiveDefinite(IHRError, ArithmeticError):
    """Cholesky hit a non-positive pivot; usually means damping is too small."""


class DimensionOverflow(IHRError, ValueError):
    pass


class NonFiniteLoss(IHRError, FloatingPointError):
    pass


class EmptyDataset(IHRError, ValueError):
    pass


class InvalidConfig(IHRError, ValueError):
    pass


class FactorMismatch(IHRError, ValueError):
    """Factors were estimated at parameters other than the ones being merged from."""


class ZeroAdjustedUpdate(IHRError, ArithmeticError):
    pass


class DivergedRun(IHRError, RuntimeError):
    pass


class IoFailure(IHRError, OSError):
    pass


class VersionMismatch(IHRError, ValueError):
    pass


class CorruptFile(IHRError, ValueError):
    pass

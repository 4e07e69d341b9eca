"""Exception hierarchy shared by all spdiff modules."""


class SPDError(Exception):
    """Base class for every error raised by this package."""


class NotSymmetric(SPDError, ValueError):
    pass


class NotPositiveDefinite(SPDError, ValueError):
    pass


class OutOfRange(SPDError, ValueError):
    pass


class ShapeMismatch(SPDError, ValueError):
    pass


class MixedShapes(SPDError, ValueError):
    """Images in one dataset do not share (C, H, W)."""


class UnsupportedFormat(SPDError, ValueError):
    pass


class EmptyDataset(SPDError, ValueError):
    pass


class NonHermitian(SPDError, ValueError):
    """Frequency tensor is not the DFT of a real image."""


class SingularBin(SPDError, ArithmeticError):
    """|c2 + f| is too close to zero for the power-law model."""


class NonConvergence(SPDError, ArithmeticError):
    pass


class NoRoot(SPDError, ArithmeticError):
    pass


class NonFiniteLoss(SPDError, ArithmeticError):
    pass

"""Exception hierarchy shared by all modules."""


class NormSoftmaxError(Exception):
    """Base class for every error raised by this package."""


class InvalidInput(NormSoftmaxError, ValueError):
    """Input data or parameters violate a documented precondition."""


class ZeroVector(InvalidInput):
    pass


class ContextMismatch(InvalidInput):
    pass


class DimensionTooSmall(InvalidInput):
    pass


class NotNormalized(InvalidInput):
    pass


class SingleClass(InvalidInput):
    pass


class InvalidClass(InvalidInput):
    pass


class InvalidMargin(InvalidInput):
    pass


class TargetNotActive(InvalidInput):
    pass


class ShapeMismatch(InvalidInput):
    pass


class InvalidParams(InvalidInput):
    pass


class SpecInfeasible(InvalidInput):
    pass


class KTooLarge(InvalidInput):
    pass


class LengthMismatch(InvalidInput):
    pass


class FormatError(InvalidInput):
    """A file does not follow its on-disk layout."""


class NonFiniteLoss(NormSoftmaxError, ArithmeticError):
    """Training produced a NaN/Inf loss; carries the offending iteration."""

    def __init__(self, iteration, value):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration
        self.value = value

"""Exception hierarchy for harnacklab."""


class HarnackLabError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(HarnackLabError, ValueError):
    pass


class CapacityError(HarnackLabError):
    pass


class SamplingError(HarnackLabError, ValueError):
    pass


class InteriorMarginError(HarnackLabError):
    """A finite-difference stencil leaves the grid."""


class UnsupportedOrderError(HarnackLabError, ValueError):
    pass


class DomainError(HarnackLabError, ValueError):
    pass


class RegionError(HarnackLabError, ValueError):
    pass


class KernelResolutionError(HarnackLabError, ValueError):
    pass


class AlignmentError(HarnackLabError, ValueError):
    pass


class SymmetryError(HarnackLabError, ValueError):
    pass


class NumericError(HarnackLabError, ArithmeticError):
    pass


class ParameterError(HarnackLabError, ValueError):
    pass


class ConvexityError(HarnackLabError, ValueError):
    pass


class DegenerateGapError(HarnackLabError):
    """Eigenvalue gap falls inside the ambiguity zone [gap_tol, 10 gap_tol]."""


class SingularGapError(HarnackLabError, ZeroDivisionError):
    pass


class DeclarationError(HarnackLabError, ValueError):
    pass


class DefinitenessError(HarnackLabError, ValueError):
    pass


class EllipticityError(HarnackLabError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class ConvergenceError(HarnackLabError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class UnreliableSampleError(HarnackLabError):
    pass


class InconsistencyError(HarnackLabError):
    pass


class NotASubsolutionError(HarnackLabError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point

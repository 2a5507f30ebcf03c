"""Exception types raised across the package."""


class FracSVError(Exception):
    """Base class for all package errors."""


class InvalidParameter(FracSVError, ValueError):
    """A parameter lies outside its admissible domain."""


class NumericalError(FracSVError, ArithmeticError):
    """A numerical pathology; samplers treat these as rejected proposals."""


class SpectrumNegative(NumericalError):
    pass


class SpectrumNearZero(NumericalError):
    pass


class ImaginaryLeak(NumericalError):
    pass


class DegenerateVariance(NumericalError):
    pass


class NonFiniteState(NumericalError):
    pass


class DataError(FracSVError):
    """Malformed or inconsistent observation data."""


class ConstantSeries(FracSVError, ValueError):
    pass


class EmptyChain(FracSVError, ValueError):
    pass


class MismatchedRuns(FracSVError, ValueError):
    pass

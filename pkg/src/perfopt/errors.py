"""Exception hierarchy shared across the package."""


class PerfOptError(Exception):
    """Base class for all errors raised by perfopt."""


class InvalidInputError(PerfOptError, ValueError):
    pass


class InvalidBoundsError(InvalidInputError):
    pass


class SingularMatrixError(PerfOptError, ArithmeticError):
    pass


class DomainError(PerfOptError, ValueError):
    """Parameters outside the region where a closed form is defined."""


class InsufficientHorizonError(PerfOptError, ValueError):
    pass


class DegenerateWindowError(PerfOptError, ArithmeticError):
    """The trajectory window does not span enough directions to regress on.

    Recoverable: optimizers fall back to their previous gradient estimate.
    Raising the perturbation size usually cures it.
    """


class NonContractiveError(PerfOptError, ArithmeticError):
    """Estimated state partial has spectral norm >= 1, so the Neumann series diverges."""

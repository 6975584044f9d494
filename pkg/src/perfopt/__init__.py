"""Optimization under stateful performative distribution shift.

Core pieces:

* :mod:`perfopt.linalg`       small dense kernels (pinv, inverse, clipping, box projection)
* :mod:`perfopt.environments` the five simulated populations and their long-term maps
* :mod:`perfopt.estimators`   finite-difference partials, long-term Jacobian and gradient
* :mod:`perfopt.optimizers`   SPGD, bottleneck SPGD, RGD, waiting PerfGD, one-point DFO
* :mod:`perfopt.oracles`      finite differences, settling, OPT search, Monte-Carlo
* :mod:`perfopt.harness`      configs, grid search, CSV/JSON output and the CLI
"""

from perfopt.errors import (
    DegenerateWindowError,
    DomainError,
    InsufficientHorizonError,
    InvalidBoundsError,
    InvalidInputError,
    NonContractiveError,
    PerfOptError,
    SingularMatrixError,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateWindowError",
    "DomainError",
    "InsufficientHorizonError",
    "InvalidBoundsError",
    "InvalidInputError",
    "NonContractiveError",
    "PerfOptError",
    "SingularMatrixError",
]

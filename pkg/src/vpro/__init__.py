"""Variable-projection training for separable models W * F(y, theta).

The package trains models whose last layer is linear by eliminating the
linear weights through an inner convex solve and optimizing the reduced
objective over the feature-extractor weights with a Gauss-Newton-Krylov
trust-region method; full-model baselines (Gauss-Newton, L-BFGS, ADAM,
Nesterov SGD) and a shallow-to-deep multilevel driver share the same
work-unit accounting.
"""

from .exceptions import (
    ConfigError,
    DivergedForwardError,
    FileFormatError,
    InvalidInputError,
    NumericalError,
    OptimizerStallError,
    ShapeError,
    StaleTapeError,
    UnsupportedRefinementError,
    VproError,
)
from .features import ArchSpec, PassCounter, forward, init_weights, jvp, prolongate, vjp
from .inner import InnerConfig, InnerProblem, TrustRegionParams, solve_ce, solve_ls
from .losses import LossKind
from .reduced import Batch, Regularizer, eval_full, eval_reduced

__all__ = [
    "ArchSpec",
    "Batch",
    "ConfigError",
    "DivergedForwardError",
    "FileFormatError",
    "InnerConfig",
    "InnerProblem",
    "InvalidInputError",
    "LossKind",
    "NumericalError",
    "OptimizerStallError",
    "PassCounter",
    "Regularizer",
    "ShapeError",
    "StaleTapeError",
    "TrustRegionParams",
    "UnsupportedRefinementError",
    "VproError",
    "eval_full",
    "eval_reduced",
    "forward",
    "init_weights",
    "jvp",
    "prolongate",
    "solve_ce",
    "solve_ls",
    "vjp",
]

__version__ = "0.1.0"

"""Exception types shared across the package."""


class VproError(Exception):
    """Base class for all package errors."""


class InvalidInputError(VproError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(InvalidInputError):
    """Array dimensions are inconsistent with the operation."""


class NumericalError(VproError, RuntimeError):
    """An iterative numerical procedure failed to converge or broke down."""


class DivergedForwardError(NumericalError):
    """Non-finite activations appeared during a forward pass."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite activations at time step {step}")


class StaleTapeError(VproError, RuntimeError):
    """A tape or handle was used after the weights it was built for changed."""


class UnsupportedRefinementError(InvalidInputError):
    """Prolongation requested to a depth other than twice the current one."""


class FileFormatError(VproError, ValueError):
    """A matrix or checkpoint file is malformed; message carries the location."""


class ConfigError(VproError, ValueError):
    """An experiment configuration file is invalid."""


class OptimizerStallError(VproError, RuntimeError):
    """An optimizer made no acceptable progress and gave up."""

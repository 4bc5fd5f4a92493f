"""Loss families (least squares, logistic, multinomial) with derivatives.

Each evaluator consumes the model output matrix ``X`` (targets x samples)
and the target matrix ``C`` of the same column count, and returns a
:class:`LossEval` holding the scalar value, the stacked per-sample
gradients, and a per-sample Hessian action.  The ``1/|T|`` batch average
is folded in here, so optimizers and solvers downstream see
already-averaged quantities.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

from .exceptions import InvalidInputError, ShapeError

SIMPLEX_TOL = 1e-8


class LossKind(enum.Enum):
    LEAST_SQUARES = "least_squares"
    LOGISTIC = "logistic"
    MULTINOMIAL = "multinomial"

    @classmethod
    def parse(cls, name):
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise InvalidInputError(f"unknown loss kind {name!r}; expected one of {valid}")

    @property
    def is_cross_entropy(self):
        return self is not LossKind.LEAST_SQUARES


@dataclass(frozen=True)
class LossEval:
    """Value, stacked gradient, and Hessian action of a batch loss.

    ``grad`` has the shape of the model output; ``hess_apply`` maps a
    matrix of that shape to another by applying each sample's (symmetric
    positive semidefinite) Hessian block to the matching column.
    """

    value: float
    grad: np.ndarray
    hess_apply: Callable[[np.ndarray], np.ndarray]


def _check_shapes(x, c):
    if x.shape != c.shape:
        raise ShapeError(f"output shape {x.shape} does not match target shape {c.shape}")
    if x.ndim != 2 or x.shape[1] == 0:
        raise ShapeError("expected nonempty 2-D batches")


def eval_least_squares(x, c):
    """Mean squared misfit ``(1/(2|T|)) ||X - C||_F^2`` with derivatives."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    _check_shapes(x, c)
    nt = x.shape[1]
    resid = x - c
    value = 0.5 * float(np.sum(resid * resid)) / nt
    grad = resid / nt

    def hess_apply(s):
        return np.asarray(s, dtype=np.float64) / nt

    return LossEval(value=value, grad=grad, hess_apply=hess_apply)


def softmax_columns(x):
    """Column-wise softmax with max-shift for overflow safety."""
    shifted = x - np.max(x, axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=0, keepdims=True)


def eval_multinomial(x, c):
    """Batch-averaged cross entropy of column softmax probabilities.

    Targets must be simplex columns (entries summing to 1).  Per sample
    the gradient is ``(p - c)/|T|`` and the Hessian is
    ``(diag(p) - p p^T)/|T|`` with ``p`` the softmax of the logits.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    _check_shapes(x, c)
    sums = np.sum(c, axis=0)
    bad = np.abs(sums - 1.0) > SIMPLEX_TOL
    if np.any(bad):
        first = int(np.argmax(bad))
        raise InvalidInputError(
            f"target column {first} sums to {sums[first]:.6g}, expected 1 within {SIMPLEX_TOL}"
        )
    nt = x.shape[1]
    shifted = x - np.max(x, axis=0, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=0, keepdims=True))
    log_p = shifted - log_norm
    p = np.exp(log_p)
    value = -float(np.sum(c * log_p)) / nt
    grad = (p - c) / nt

    def hess_apply(s):
        s = np.asarray(s, dtype=np.float64)
        return (p * s - p * np.sum(p * s, axis=0, keepdims=True)) / nt

    return LossEval(value=value, grad=grad, hess_apply=hess_apply)


def eval_logistic(x, c):
    """Batch-averaged binary cross entropy of sigmoid probabilities.

    ``x`` and ``c`` are 1 x |T|; targets must be exactly 0 or 1.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    _check_shapes(x, c)
    if x.shape[0] != 1:
        raise ShapeError("logistic loss expects scalar outputs (one row)")
    if not np.all((c == 0.0) | (c == 1.0)):
        raise InvalidInputError("logistic targets must be 0 or 1")
    nt = x.shape[1]
    # -[c log h + (1-c) log(1-h)] = softplus(x) - c*x, stable via logaddexp
    value = float(np.sum(np.logaddexp(0.0, x) - c * x)) / nt
    h = expit(x)
    grad = (h - c) / nt
    weight = h * (1.0 - h) / nt

    def hess_apply(s):
        return weight * np.asarray(s, dtype=np.float64)

    return LossEval(value=value, grad=grad, hess_apply=hess_apply)


_EVALUATORS = {
    LossKind.LEAST_SQUARES: eval_least_squares,
    LossKind.LOGISTIC: eval_logistic,
    LossKind.MULTINOMIAL: eval_multinomial,
}


def evaluate(kind, x, c):
    """Dispatch to the evaluator for ``kind``."""
    return _EVALUATORS[LossKind(kind)](x, c)

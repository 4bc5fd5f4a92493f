"""Solvers for the eliminated linear block W at fixed features.

Least squares has a closed form through the reduced SVD of the scaled
feature matrix; the cross-entropy losses are solved with a Newton-Krylov
trust-region iteration whose final Arnoldi factorization is kept for the
implicit Jacobian of W(theta).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from . import losses
from .exceptions import InvalidInputError, NumericalError, ShapeError
from .linalg import KrylovFactors, SvdFactors, arnoldi, hessenberg_lsq, reduced_svd

EPS_REL_DEFAULT = 1e-10
EPS_ABS_DEFAULT = 1e-10
LAMBDA_NORM_TOL = 1e-8


@dataclass(frozen=True)
class InnerProblem:
    """Data of the convex problem min_W loss(W Z, C) + (alpha2/2)||W||_F^2."""

    z: np.ndarray
    c: np.ndarray
    loss: losses.LossKind
    alpha2: float

    def __post_init__(self):
        if self.z.shape[1] != self.c.shape[1]:
            raise ShapeError("feature and target batches differ in sample count")
        if self.alpha2 < 0.0:
            raise InvalidInputError("alpha2 must be nonnegative")
        if losses.LossKind(self.loss).is_cross_entropy and self.alpha2 <= 0.0:
            raise InvalidInputError("cross-entropy elimination needs alpha2 > 0")


@dataclass
class TrustRegionParams:
    """Radius management constants, following standard trust-region
    guidelines: accept above ``eta_accept``, expand on strong boundary
    steps, halve on rejection."""

    delta0: float = 1.0
    eta_accept: float = 0.1
    eta_expand: float = 0.75
    expand: float = 2.0
    shrink: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.eta_accept < 1.0):
            raise InvalidInputError("eta_accept must lie in (0, 1)")
        if not (self.shrink < 1.0 < self.expand):
            raise InvalidInputError("need shrink < 1 < expand")


@dataclass
class InnerSolution:
    """Optimal W with the factorization reused downstream.

    ``svd`` holds the factors of Z/sqrt(|T|) on the least-squares path;
    ``krylov`` holds the Arnoldi factors of the final accepted Hessian on
    the cross-entropy path.
    """

    w: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    objective: float
    alpha2: float = 0.0
    svd: Optional[SvdFactors] = None
    krylov: Optional[KrylovFactors] = None
    trials: int = 0
    tr_norm_dev_max: float = 0.0


@dataclass
class InnerConfig:
    """Knobs of the inner solve, dispatched by loss kind.

    The tolerances follow the convergence criteria
    ``||grad|| <= max(eps_rel * ||grad_0||, eps_abs)`` with both defaults
    at 1e-10; ``r_max=None`` lets the Krylov rank grow to the full
    dimension of W.
    """

    eps_rel: float = EPS_REL_DEFAULT
    eps_abs: float = EPS_ABS_DEFAULT
    r_max: Optional[int] = None
    krylov_tol: float = 1e-10
    max_iter: int = 100
    tr: TrustRegionParams = field(default_factory=TrustRegionParams)

    def solve(self, problem, warm=None):
        if losses.LossKind(problem.loss) is losses.LossKind.LEAST_SQUARES:
            return solve_ls(problem)
        return solve_ce(problem, warm=warm, tr=self.tr, r_max=self.r_max,
                        krylov_tol=self.krylov_tol, eps_rel=self.eps_rel,
                        eps_abs=self.eps_abs, max_iter=self.max_iter)


def solve_ls(problem):
    """Closed-form ridge solution through the SVD of Z/sqrt(|T|).

    Requires at least as many samples as output features.  Rows of W are
    independent, so the whole batch is solved in one matrix product.
    """
    if losses.LossKind(problem.loss) is not losses.LossKind.LEAST_SQUARES:
        raise InvalidInputError("solve_ls handles the least-squares loss only")
    z, c = problem.z, problem.c
    n_out, nt = z.shape
    if nt < n_out:
        raise InvalidInputError(
            f"need at least as many samples ({nt}) as features ({n_out})"
        )
    factors = reduced_svd(z / np.sqrt(nt))
    sigma = factors.sigma
    denom = sigma**2 + problem.alpha2
    ratio = np.divide(sigma, denom, out=np.zeros_like(sigma), where=denom > 0.0)
    w = (c @ factors.v) * ratio @ factors.u.T / np.sqrt(nt)
    x = w @ z
    obj = losses.eval_least_squares(x, c).value + 0.5 * problem.alpha2 * float(
        np.sum(w * w)
    )
    grad = _ce_grad(problem, w)  # same formula applies: dL @ Z^T + alpha2 W
    return InnerSolution(w=w, converged=True, iterations=0,
                         grad_norm=float(np.linalg.norm(grad)), objective=obj,
                         alpha2=problem.alpha2, svd=factors)


def _ce_value_grad(problem, w):
    le = losses.evaluate(problem.loss, w @ problem.z, problem.c)
    value = le.value + 0.5 * problem.alpha2 * float(np.sum(w * w))
    grad = le.grad @ problem.z.T + problem.alpha2 * w
    return value, grad, le


def _ce_grad(problem, w):
    return _ce_value_grad(problem, w)[1]


def _ce_hess_apply(problem, loss_eval, v_mat):
    return loss_eval.hess_apply(v_mat @ problem.z) @ problem.z.T + problem.alpha2 * v_mat


def solve_ce(problem, warm=None, tr=None, r_max=None, krylov_tol=1e-10,
             eps_rel=EPS_REL_DEFAULT, eps_abs=EPS_ABS_DEFAULT, max_iter=100):
    """Newton-Krylov trust region for the cross-entropy elimination.

    Starts from ``warm`` (the previous outer iterate's solution) and stops
    when the gradient norm falls below ``max(eps_rel * initial, eps_abs)``
    or after ``max_iter`` Newton steps; an unconverged run is returned
    with ``converged=False`` for the caller to judge.  The Arnoldi
    factorization is refreshed only when a trial step is accepted.
    """
    kind = losses.LossKind(problem.loss)
    if not kind.is_cross_entropy:
        raise InvalidInputError("solve_ce handles logistic/multinomial losses only")
    tr = tr or TrustRegionParams()
    n_target = problem.c.shape[0] if kind is losses.LossKind.MULTINOMIAL else 1
    n_out = problem.z.shape[0]
    w = np.zeros((n_target, n_out)) if warm is None else np.array(warm, dtype=np.float64)
    if w.shape != (n_target, n_out):
        raise ShapeError(f"warm start shape {w.shape}, expected {(n_target, n_out)}")
    n_w = n_target * n_out
    if r_max is None:
        r_max = n_w

    value, grad, le = _ce_value_grad(problem, w)
    g0_norm = float(np.linalg.norm(grad))
    tol = max(eps_rel * g0_norm, eps_abs)
    delta = tr.delta0
    factors = None
    iterations = 0
    trials = 0
    dev_max = 0.0
    grad_norm = g0_norm

    while grad_norm > tol and iterations < max_iter:
        def hess_vec(v, _le=le):
            return _ce_hess_apply(problem, _le, v.reshape(n_target, n_out)).ravel()

        factors = arnoldi(hess_vec, grad.ravel(), tol=krylov_tol, r_max=r_max)
        accepted = False
        while not accepted:
            lam, z, boundary = _subproblem_step(factors, delta)
            if boundary:
                dev_max = max(dev_max, abs(np.linalg.norm(z) - delta) / delta)
            dw = -(factors.q_r @ z).reshape(n_target, n_out)
            pred = _predicted_reduction(factors, z)
            w_trial = w + dw
            value_trial, grad_trial, le_trial = _ce_value_grad(problem, w_trial)
            trials += 1
            actual = value - value_trial
            # near the optimum both reductions sink below roundoff in the
            # objective; accept any non-increasing step there
            noise = 64.0 * np.finfo(float).eps * max(1.0, abs(value))
            if pred <= noise:
                ratio = 1.0 if actual >= -noise else -np.inf
            else:
                ratio = actual / pred
            if np.isfinite(value_trial) and ratio > tr.eta_accept:
                accepted = True
                w, value, grad, le = w_trial, value_trial, grad_trial, le_trial
                grad_norm = float(np.linalg.norm(grad))
                if ratio > tr.eta_expand and boundary:
                    delta *= tr.expand
            else:
                delta *= tr.shrink
                if delta < 1e-16:
                    return InnerSolution(
                        w=w, converged=False, iterations=iterations,
                        grad_norm=grad_norm, objective=value,
                        alpha2=problem.alpha2, krylov=factors,
                        trials=trials, tr_norm_dev_max=dev_max)
        iterations += 1

    return InnerSolution(w=w, converged=grad_norm <= tol, iterations=iterations,
                         grad_norm=grad_norm, objective=value,
                         alpha2=problem.alpha2, krylov=factors,
                         trials=trials, tr_norm_dev_max=dev_max)


def _subproblem_step(factors, delta):
    """Solve the projected trust-region subproblem; returns (lambda, z,
    hit_boundary)."""
    z0 = hessenberg_lsq(factors.h, factors.beta, 0.0)
    if np.linalg.norm(z0) <= delta:
        return 0.0, z0, False
    lam, z = tr_lambda_search(factors, delta)
    return lam, z, True


def _predicted_reduction(factors, z):
    """Model decrease of the quadratic, expressed in the Krylov basis.

    With seed g/beta and step -Q_r z the linear term is beta*z[0] and the
    curvature term uses the square part of H.
    """
    h_sq = factors.h[: factors.rank, :]
    return float(factors.beta * z[0] - 0.5 * z @ (h_sq @ z))


def tr_lambda_search(factors, delta):
    """Smallest ridge weight placing the subproblem step on the radius.

    The map ``lambda -> ||z*(lambda)||`` is monotone decreasing, so the
    root of ``||z*(lambda)|| = delta`` is found with safeguarded scalar
    root finding, bracketed initially by [0, beta/delta] and expanded
    geometrically if needed.
    """
    if delta <= 0.0:
        raise InvalidInputError("delta must be positive")
    h, beta = factors.h, factors.beta

    def step_norm(lam):
        return float(np.linalg.norm(hessenberg_lsq(h, beta, lam)))

    if step_norm(0.0) <= delta:
        return 0.0, hessenberg_lsq(h, beta, 0.0)

    hi = beta / delta
    limit = hi * 2.0**64
    while step_norm(hi) > delta:
        hi *= 2.0
        if hi > limit:
            raise NumericalError(
                "trust-region lambda bracket expansion exceeded 2^64 * beta/delta"
            )
    lam = brentq(lambda lam: step_norm(lam) - delta, 0.0, hi,
                 xtol=1e-18, rtol=1e-14, maxiter=200)
    z = hessenberg_lsq(h, beta, lam)
    dev = abs(np.linalg.norm(z) - delta) / delta
    if dev > LAMBDA_NORM_TOL:
        raise NumericalError(f"lambda search missed the radius: |dz|/delta = {dev:.2e}")
    return float(lam), z

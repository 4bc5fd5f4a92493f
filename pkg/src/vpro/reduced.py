"""Objective evaluation for the full and reduced (variable-projection)
training problems, with matrix-free Jacobian and Gauss-Newton operators.

The reduced path eliminates W by an inner solve, evaluates the objective
at (W(theta), theta), and exposes a Jacobian handle implementing

    J apply:   dtheta -> W * (J_theta F dtheta) + (J_theta w dtheta) * F
    J applyT:  dS     -> J_theta F^T (W^T dS) + J_theta w^T vec(dS F^T)

without ever forming a Kronecker product.  The implicit derivative of the
eliminated weights reuses the factorization retained by the inner solver:
the SVD of the scaled features for least squares, the final Arnoldi
factors (through a Moore-Penrose inverse of the Hessenberg matrix) for
cross entropy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import features as ft
from . import inner as inn
from . import losses
from .data import IdentityOperator, TimeDiffOperator
from .exceptions import InvalidInputError
from .linalg import HessenbergPinv, arnoldi


@dataclass(frozen=True)
class Batch:
    """Column-matched input and target matrices."""

    y: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if self.y.shape[1] != self.c.shape[1]:
            raise InvalidInputError("inputs and targets differ in sample count")

    @property
    def size(self):
        return self.y.shape[1]


@dataclass
class Regularizer:
    """Tikhonov terms (alpha1/2)||B theta||^2 and (alpha2/2)||W||_F^2."""

    alpha1: float
    alpha2: float
    op: object

    @classmethod
    def for_arch(cls, arch, alpha1, alpha2, smoothing="auto"):
        """Pick the smoothing operator: time differences for neural ODEs,
        identity otherwise (or on request)."""
        if smoothing == "auto":
            smoothing = "time_diff" if arch.kind == "neural_ode" else "identity"
        if smoothing == "time_diff":
            op = TimeDiffOperator(arch)
        elif smoothing == "identity":
            op = IdentityOperator(arch.layout())
        else:
            raise InvalidInputError(f"unknown smoothing operator {smoothing!r}")
        return cls(alpha1=float(alpha1), alpha2=float(alpha2), op=op)

    def value(self, theta):
        bt = self.op.apply(theta)
        return 0.5 * self.alpha1 * float(bt @ bt)

    def grad(self, theta):
        return self.alpha1 * self.op.apply_t(self.op.apply(theta))

    def curv_apply(self, dtheta):
        return self.alpha1 * self.op.apply_t(self.op.apply(dtheta))

    def w_value(self, w):
        return 0.5 * self.alpha2 * float(np.sum(w * w))

    def w_grad(self, w):
        return self.alpha2 * w


@dataclass
class ObjectiveEval:
    """Value, gradients, and Jacobian handle at one weight configuration.

    ``grad_w`` is populated on the full path only.  ``degraded`` marks an
    evaluation whose inner solve stopped before reaching its gradient
    tolerance; the attached inner solution carries the residual norm.
    The tape of the forward pass is kept so the gradient and Jacobian can
    be completed later without recomputing the trajectory.
    """

    value: float
    w: np.ndarray
    z: np.ndarray
    loss_eval: losses.LossEval
    theta: Optional[np.ndarray] = None
    tape: Optional[ft.TapeCache] = None
    grad_theta: Optional[np.ndarray] = None
    grad_w: Optional[np.ndarray] = None
    jac: Optional[object] = None
    inner: Optional[inn.InnerSolution] = None
    degraded: bool = False

    @property
    def grad_flat(self):
        """Gradient in optimizer coordinates: theta alone on the reduced
        path, (vec W, theta) concatenated on the full path."""
        if self.grad_w is None:
            return self.grad_theta
        return np.concatenate([self.grad_w.ravel(), self.grad_theta])


class LsImplicitJacobian:
    """Directional derivative of the eliminated least-squares weights,
    reusing the SVD of Z/sqrt(|T|)."""

    def __init__(self, sol, w, z, c):
        self.svd = sol.svd
        self.alpha2 = sol.alpha2
        self.w = w
        self.z = z
        self.nt = z.shape[1]
        self.residual = w @ z - c
        self.d = 1.0 / (self.svd.sigma**2 + self.alpha2)
        if not np.all(np.isfinite(self.d)):
            raise InvalidInputError(
                "least-squares W-Jacobian needs alpha2 > 0 or full-rank features"
            )

    def apply_dz(self, dz):
        """dW given the feature perturbation dZ = J_theta Z dtheta."""
        u, v, sig = self.svd.u, self.svd.v, self.svd.sigma
        term = (self.w @ dz @ v) * sig / np.sqrt(self.nt)
        term += (self.residual @ dz.T @ u) / self.nt
        return -(term * self.d) @ u.T

    def apply_t_mat(self, delta):
        """Adjoint: maps Delta (N_target x N_out) to the feature-space
        matrix fed into the feature-extractor vjp."""
        u, v, sig = self.svd.u, self.svd.v, self.svd.sigma
        out = -(self.w.T @ delta @ u) * (self.d * sig) @ v.T / np.sqrt(self.nt)
        out -= (u * self.d) @ u.T @ delta.T @ self.residual / self.nt
        return out


class CeImplicitJacobian:
    """Implicit derivative of the cross-entropy elimination via the
    retained Arnoldi factors and a Moore-Penrose inverse of H."""

    def __init__(self, factors, w, z, loss_eval):
        self.factors = factors
        self.pinv = HessenbergPinv(factors.h_effective)
        self.w = w
        self.z = z
        self.le = loss_eval
        self.shape = w.shape

    def apply_dz(self, dz):
        """dW given dZ; applies -(Q_r pinv(H) Q_{r+1}^T) J_theta grad_w."""
        m = self.le.hess_apply(self.w @ dz) @ self.z.T + self.le.grad @ dz.T
        coeff = self.factors.q.T @ m.ravel()
        dw = self.factors.q_r @ self.pinv.apply(coeff)
        return -dw.reshape(self.shape)

    def apply_t_mat(self, delta):
        coeff = self.factors.q_r.T @ delta.ravel()
        u_vec = self.factors.q @ self.pinv.apply_t(coeff)
        u_mat = u_vec.reshape(self.shape)
        return -(self.w.T @ self.le.hess_apply(u_mat @ self.z) + u_mat.T @ self.le.grad)


def jacobian_w_ls(sol, dz, residual):
    """Eq.-style one-shot form of the least-squares W derivative."""
    u, v, sig = sol.svd.u, sol.svd.v, sol.svd.sigma
    nt = dz.shape[1]
    d = 1.0 / (sig**2 + sol.alpha2)
    w = sol.w
    term = (w @ dz @ v) * sig / np.sqrt(nt) + (residual @ dz.T @ u) / nt
    return -(term * d) @ u.T


def ce_w_jacobian(sol, problem, w, z, loss_eval, r_max=None):
    """Build the implicit CE W-Jacobian, rebuilding Arnoldi factors when
    the inner solve converged without producing any (or when a different
    rank is requested)."""
    factors = sol.krylov
    if factors is None or r_max is not None:
        n_w = w.size

        def hess_vec(vec):
            v_mat = vec.reshape(w.shape)
            return inn._ce_hess_apply(problem, loss_eval, v_mat).ravel()

        grad = loss_eval.grad @ z.T + problem.alpha2 * w
        seed = grad.ravel()
        if np.linalg.norm(seed) == 0.0:
            seed = np.ones(n_w)
        factors = arnoldi(hess_vec, seed, tol=0.0, r_max=r_max or n_w)
    return CeImplicitJacobian(factors, w, z, loss_eval)


def jacobian_w_ce_apply(jac, dtheta_dz):
    """Apply the CE implicit Jacobian to a feature perturbation dZ."""
    return jac.apply_dz(dtheta_dz)


def jacobian_w_ce_apply_t(jac, delta):
    """Transpose application; returns the matrix routed into the vjp."""
    return jac.apply_t_mat(delta)


class ReducedJacobian:
    """Matrix-free J_theta G_red and its exact transpose.

    Snapshot semantics: the handle owns copies of the weights and tape it
    was built from, so later weight updates do not invalidate it.
    """

    def __init__(self, arch, theta, tape, w, z, loss_eval, w_jac, reg,
                 counter=None):
        self.arch = arch
        self.theta = theta.copy()
        self.tape = tape
        self.w = w
        self.z = z
        self.le = loss_eval
        self.w_jac = w_jac
        self.reg = reg
        self.counter = counter

    def apply(self, dtheta):
        dz = ft.jvp(self.arch, self.theta, self.tape, dtheta, self.counter)
        out = self.w @ dz
        if self.w_jac is not None:
            out += self.w_jac.apply_dz(dz) @ self.z
        return out

    def apply_t(self, ds):
        pre = self.w.T @ ds
        if self.w_jac is not None:
            pre += self.w_jac.apply_t_mat(ds @ self.z.T)
        return ft.vjp(self.arch, self.theta, self.tape, pre, self.counter)

    def curv_apply(self, dtheta):
        """Gauss-Newton curvature J^T (grad^2 L) J plus regularizer."""
        s = self.apply(dtheta)
        out = self.apply_t(self.le.hess_apply(s))
        out += self.reg.curv_apply(dtheta)
        return out

    curv_flat = curv_apply


class FullJacobian:
    """Matrix-free J_{(W,theta)} of the un-reduced model output W Z(theta)."""

    def __init__(self, arch, theta, tape, w, z, loss_eval, reg, counter=None):
        self.arch = arch
        self.theta = theta.copy()
        self.tape = tape
        self.w = w
        self.z = z
        self.le = loss_eval
        self.reg = reg
        self.counter = counter

    def apply(self, dw, dtheta):
        return dw @ self.z + self.w @ ft.jvp(self.arch, self.theta, self.tape,
                                             dtheta, self.counter)

    def apply_t(self, ds):
        dw = ds @ self.z.T
        dtheta = ft.vjp(self.arch, self.theta, self.tape, self.w.T @ ds, self.counter)
        return dw, dtheta

    def curv_apply(self, dw, dtheta):
        s = self.le.hess_apply(self.apply(dw, dtheta))
        out_w, out_theta = self.apply_t(s)
        out_w += self.reg.alpha2 * dw
        out_theta += self.reg.curv_apply(dtheta)
        return out_w, out_theta

    def curv_flat(self, dx):
        n_w = self.w.size
        dw = dx[:n_w].reshape(self.w.shape)
        out_w, out_theta = self.curv_apply(dw, dx[n_w:])
        return np.concatenate([out_w.ravel(), out_theta])


class ReducedEvaluator:
    """Algorithm wrapper for the reduced objective over theta.

    ``forward_eval`` runs one forward pass plus the inner solve (which
    costs no feature-extractor passes) and returns a value-only
    evaluation; ``add_gradient`` completes it with one backward pass on
    the stored tape.  The evaluator warm-starts each inner solve from the
    previous one unless told otherwise.
    """

    def __init__(self, arch, batch, loss_kind, reg, inner_cfg=None,
                 counter=None, warm_start=True):
        self.arch = arch
        self.batch = batch
        self.kind = losses.LossKind(loss_kind)
        self.reg = reg
        self.inner_cfg = inner_cfg or inn.InnerConfig()
        self.counter = counter
        self.warm_start = warm_start
        self.warm = None
        self.dim = arch.layout().size

    def forward_eval(self, theta, warm="carry"):
        if warm == "carry":
            warm = self.warm if self.warm_start else None
        z, tape = ft.forward(self.arch, theta, self.batch.y, self.counter)
        problem = inn.InnerProblem(z=z, c=self.batch.c, loss=self.kind,
                                   alpha2=self.reg.alpha2)
        sol = self.inner_cfg.solve(problem, warm=warm)
        if self.warm_start:
            self.warm = sol.w
        le = losses.evaluate(self.kind, sol.w @ z, self.batch.c)
        value = le.value + self.reg.value(theta) + self.reg.w_value(sol.w)
        return ObjectiveEval(value=value, w=sol.w, z=z, loss_eval=le,
                             theta=np.asarray(theta, dtype=np.float64).copy(),
                             tape=tape, inner=sol, degraded=not sol.converged)

    def add_gradient(self, ev):
        g = ft.vjp(self.arch, ev.theta, ev.tape, ev.w.T @ ev.loss_eval.grad,
                   self.counter)
        ev.grad_theta = g + self.reg.grad(ev.theta)
        return ev

    def add_jacobian(self, ev, ce_r_max=None):
        if self.kind is losses.LossKind.LEAST_SQUARES:
            w_jac = LsImplicitJacobian(ev.inner, ev.w, ev.z, self.batch.c)
        else:
            problem = inn.InnerProblem(z=ev.z, c=self.batch.c, loss=self.kind,
                                       alpha2=self.reg.alpha2)
            w_jac = ce_w_jacobian(ev.inner, problem, ev.w, ev.z, ev.loss_eval,
                                  r_max=ce_r_max)
        ev.jac = ReducedJacobian(self.arch, ev.theta, ev.tape, ev.w, ev.z,
                                 ev.loss_eval, w_jac, self.reg, self.counter)
        return ev


class FullEvaluator:
    """Algorithm wrapper for the un-reduced objective over x = (vec W, theta)."""

    def __init__(self, arch, batch, loss_kind, reg, counter=None):
        self.arch = arch
        self.batch = batch
        self.kind = losses.LossKind(loss_kind)
        self.reg = reg
        self.counter = counter
        self.n_target = batch.c.shape[0] if self.kind is not losses.LossKind.LOGISTIC else 1
        self.n_w = self.n_target * arch.n_out
        self.n_theta = arch.layout().size
        self.dim = self.n_w + self.n_theta

    def pack(self, w, theta):
        return np.concatenate([np.ravel(w), np.ravel(theta)])

    def unpack(self, x):
        w = x[: self.n_w].reshape(self.n_target, self.arch.n_out)
        return w, x[self.n_w :]

    def forward_eval(self, x, warm=None):
        w, theta = self.unpack(np.asarray(x, dtype=np.float64))
        z, tape = ft.forward(self.arch, theta, self.batch.y, self.counter)
        le = losses.evaluate(self.kind, w @ z, self.batch.c)
        value = le.value + self.reg.value(theta) + self.reg.w_value(w)
        return ObjectiveEval(value=value, w=w.copy(), z=z, loss_eval=le,
                             theta=theta.copy(), tape=tape)

    def add_gradient(self, ev):
        ev.grad_w = ev.loss_eval.grad @ ev.z.T + self.reg.w_grad(ev.w)
        g = ft.vjp(self.arch, ev.theta, ev.tape, ev.w.T @ ev.loss_eval.grad,
                   self.counter)
        ev.grad_theta = g + self.reg.grad(ev.theta)
        return ev

    def add_jacobian(self, ev):
        ev.jac = FullJacobian(self.arch, ev.theta, ev.tape, ev.w, ev.z,
                              ev.loss_eval, self.reg, self.counter)
        return ev

    def minibatch_eval(self, x, cols):
        """Value and flat gradient of the objective restricted to a column
        subset (loss averaged over the subset, regularizers in full)."""
        w, theta = self.unpack(np.asarray(x, dtype=np.float64))
        y = self.batch.y[:, cols]
        c = self.batch.c[:, cols]
        z, tape = ft.forward(self.arch, theta, y, self.counter)
        le = losses.evaluate(self.kind, w @ z, c)
        value = le.value + self.reg.value(theta) + self.reg.w_value(w)
        grad_w = le.grad @ z.T + self.reg.w_grad(w)
        grad_theta = ft.vjp(self.arch, theta, tape, w.T @ le.grad, self.counter)
        grad_theta += self.reg.grad(theta)
        return value, np.concatenate([grad_w.ravel(), grad_theta])


def eval_full(arch, theta, w, batch, loss_kind, reg, counter=None,
              need_grad=True, need_jac=True):
    """Objective, gradients, and Jacobian handle of the full problem."""
    evaluator = FullEvaluator(arch, batch, loss_kind, reg, counter)
    ev = evaluator.forward_eval(evaluator.pack(w, theta))
    if need_grad:
        evaluator.add_gradient(ev)
    if need_jac:
        evaluator.add_jacobian(ev)
    return ev


def eval_reduced(arch, theta, batch, loss_kind, reg, inner_cfg=None,
                 warm_w=None, counter=None, need_grad=True, need_jac=True):
    """Objective of the reduced problem: inner solve, then evaluation at
    (W(theta), theta).

    The gradient is the partial theta-gradient of the full objective at
    the eliminated weights; the implicit term vanishes at an exact inner
    solution, so an inexact solve marks the evaluation ``degraded`` and
    the residual gradient norm rides along on ``ev.inner``.
    """
    evaluator = ReducedEvaluator(arch, batch, loss_kind, reg, inner_cfg,
                                 counter, warm_start=False)
    ev = evaluator.forward_eval(theta, warm=warm_w)
    if need_grad:
        evaluator.add_gradient(ev)
    if need_jac:
        evaluator.add_jacobian(ev)
    return ev


def gn_model_apply(ev, dtheta):
    """Pieces of the Gauss-Newton quadratic model along one direction:
    ``(g . dtheta, dtheta . C dtheta)`` with C the GN curvature."""
    g_term = float(ev.grad_theta @ dtheta)
    curv = ev.jac.curv_apply(dtheta)
    return g_term, float(dtheta @ curv)

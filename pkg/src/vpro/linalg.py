"""Dense factorization kernels: reduced SVD and adaptive-rank Arnoldi.

Everything operates on float64 numpy arrays.  The two factor bundles
returned here (:class:`SvdFactors`, :class:`KrylovFactors`) are reused by
the inner solvers and by the implicit Jacobian of the eliminated linear
weights, so they are immutable value objects.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError, NumericalError

# Relative cutoff below which singular values of a Hessenberg matrix are
# treated as zero when forming its Moore-Penrose inverse.
PINV_TRUNCATION = 1e-12

# A new Arnoldi basis vector with norm below this multiple of the seed norm
# signals an exact invariant subspace.
BREAKDOWN_TOL = 1e-14


def _check_finite(a, name):
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")


@dataclass(frozen=True)
class SvdFactors:
    """Reduced SVD ``A = U @ diag(sigma) @ V.T`` of a wide matrix.

    ``u`` is square orthonormal (rows x rows), ``sigma`` is sorted
    descending, and ``v`` has orthonormal columns (cols x rows).
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self):
        return (self.u * self.sigma) @ self.v.T


@dataclass(frozen=True)
class KrylovFactors:
    """Arnoldi factorization ``A @ Q[:, :rank] = Q @ H`` of a linear map.

    ``q`` has orthonormal columns: rank+1 of them normally, exactly
    ``rank`` when the iteration found an invariant subspace (then the last
    row of ``h`` is negligible and ``invariant`` is set).  ``beta`` is the
    norm of the seed vector; the seed itself is ``beta * q[:, 0]``.
    """

    q: np.ndarray
    h: np.ndarray
    beta: float
    rank: int
    invariant: bool = False

    @property
    def q_r(self):
        return self.q[:, : self.rank]

    @property
    def h_effective(self):
        """The Hessenberg block matching ``q``'s column count: the full
        (rank+1) x rank matrix normally, its square part on breakdown."""
        return self.h[: self.rank, :] if self.invariant else self.h


def reduced_svd(a):
    """Reduced SVD of a wide matrix (at least as many columns as rows).

    Returns :class:`SvdFactors` with square ``u``; the number of singular
    values equals the row count.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInputError("expected a 2-D array")
    rows, cols = a.shape
    if cols < rows:
        raise InvalidInputError(
            f"matrix must have at least as many columns as rows, got {rows}x{cols}"
        )
    _check_finite(a, "matrix")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - rare in LAPACK
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    return SvdFactors(u=u, sigma=s, v=vt.T)


def arnoldi(apply_a, seed, tol=1e-10, r_max=None):
    """Arnoldi factorization of a linear operator, with adaptive rank.

    Runs modified Gram-Schmidt with one full reorthogonalization pass and
    stops at the smallest rank ``r`` where the projected residual
    ``min_z ||H_r z - beta e1|| / beta`` falls at or below ``tol``, or at
    ``r_max``.  If a new basis vector collapses (norm below
    ``BREAKDOWN_TOL * beta``) the current factors are returned with
    ``invariant=True``.

    Parameters
    ----------
    apply_a : callable
        Deterministic linear map on n-vectors.
    seed : array
        Nonzero start vector; the Krylov space is built from it.
    tol : float
        Relative residual target for the adaptive stopping rule.
    r_max : int or None
        Rank cap; defaults to the ambient dimension.
    """
    seed = np.asarray(seed, dtype=np.float64).ravel()
    n = seed.size
    beta = float(np.linalg.norm(seed))
    if beta == 0.0:
        raise InvalidInputError("Arnoldi seed vector is zero")
    if r_max is None:
        r_max = n
    if r_max < 1:
        raise InvalidInputError("r_max must be at least 1")
    r_max = min(r_max, n)

    q = np.zeros((n, r_max + 1))
    h = np.zeros((r_max + 1, r_max))
    q[:, 0] = seed / beta

    e1 = np.zeros(r_max + 1)
    e1[0] = beta

    rank = 0
    invariant = False
    for j in range(r_max):
        w = np.asarray(apply_a(q[:, j]), dtype=np.float64).ravel()
        # modified Gram-Schmidt, then one reorthogonalization sweep
        for i in range(j + 1):
            h[i, j] = q[:, i] @ w
            w -= h[i, j] * q[:, i]
        corr = q[:, : j + 1].T @ w
        h[: j + 1, j] += corr
        w -= q[:, : j + 1] @ corr

        wnorm = float(np.linalg.norm(w))
        h[j + 1, j] = wnorm
        rank = j + 1
        if wnorm < BREAKDOWN_TOL * beta:
            invariant = True
            break
        q[:, j + 1] = w / wnorm

        res = _projected_residual(h[: j + 2, : j + 1], beta)
        if res <= tol:
            break

    ncols = rank if invariant else rank + 1
    return KrylovFactors(
        q=q[:, :ncols].copy(),
        h=h[: rank + 1, :rank].copy(),
        beta=beta,
        rank=rank,
        invariant=invariant,
    )


def _projected_residual(h, beta):
    rhs = np.zeros(h.shape[0])
    rhs[0] = beta
    z, *_ = np.linalg.lstsq(h, rhs, rcond=None)
    return float(np.linalg.norm(h @ z - rhs) / beta)


def hessenberg_lsq(h, beta, lam=0.0):
    """Minimizer of ``0.5*||H z - beta*e1||^2 + 0.5*lam*||z||^2``.

    For ``lam = 0`` this is the GMRES correction in the Krylov basis; a
    rank-deficient ``H`` then yields the minimum-norm solution and emits a
    warning.
    """
    h = np.asarray(h, dtype=np.float64)
    _check_finite(h, "H")
    if beta <= 0.0:
        raise InvalidInputError("beta must be positive")
    if lam < 0.0:
        raise InvalidInputError("lambda must be nonnegative")
    rows, cols = h.shape
    rhs = np.zeros(rows)
    rhs[0] = beta
    if lam == 0.0:
        z, _, rank, _ = np.linalg.lstsq(h, rhs, rcond=None)
        if rank < cols:
            warnings.warn(
                "rank-deficient Hessenberg system with lambda=0; "
                "returning the minimum-norm solution",
                RuntimeWarning,
                stacklevel=2,
            )
        return z
    stacked = np.vstack([h, np.sqrt(lam) * np.eye(cols)])
    rhs_ext = np.concatenate([rhs, np.zeros(cols)])
    z, *_ = np.linalg.lstsq(stacked, rhs_ext, rcond=None)
    return z


class HessenbergPinv:
    """Moore-Penrose inverse of a Hessenberg matrix, applied via its SVD.

    The SVD is computed once so the inverse can be applied to many
    right-hand sides (and transposed right-hand sides) without
    refactorizing.  Singular values below ``PINV_TRUNCATION * sigma_max``
    are truncated.
    """

    def __init__(self, h):
        h = np.asarray(h, dtype=np.float64)
        _check_finite(h, "H")
        u, s, vt = np.linalg.svd(h, full_matrices=False)
        cutoff = PINV_TRUNCATION * (s[0] if s.size else 0.0)
        inv = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
        self._u = u
        self._vt = vt
        self._inv = inv
        self.shape = (h.shape[1], h.shape[0])

    def apply(self, rhs):
        """Return ``pinv(H) @ rhs``."""
        rhs = np.asarray(rhs, dtype=np.float64).ravel()
        return self._vt.T @ (self._inv * (self._u.T @ rhs))

    def apply_t(self, rhs):
        """Return ``pinv(H).T @ rhs``."""
        rhs = np.asarray(rhs, dtype=np.float64).ravel()
        return self._u @ (self._inv * (self._vt @ rhs))


def pseudoinverse_apply(h, rhs):
    """One-shot ``pinv(H) @ rhs``; prefer :class:`HessenbergPinv` for reuse."""
    return HessenbergPinv(h).apply(rhs)


def pseudoinverse_apply_t(h, rhs):
    """One-shot ``pinv(H).T @ rhs``."""
    return HessenbergPinv(h).apply_t(rhs)

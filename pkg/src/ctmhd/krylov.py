"""Krylov solvers: flexible GMRES, conjugate gradients and direct fallbacks."""

from __future__ import annotations

from dataclasses import dataclass, field
import time
from typing import Callable, Optional, Union
import warnings

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

Operator = Union[np.ndarray, sp.spmatrix, spla.LinearOperator, Callable[[np.ndarray], np.ndarray]]

REORTH_THRESHOLD = 1e-8


@dataclass
class SolveConfig:
    """Outer/inner tolerances of the linear solver.

    ``inner`` selects ``"direct"`` factorizations or ``"iterative"`` inner
    solves (to relative tolerance ``inner_tol``) inside the preconditioner.
    """

    tol: float = 1e-6
    maxiter: int = 200
    restart: Optional[int] = None  # None: no restart
    inner_tol: float = 1e-3
    inner: str = "direct"

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.maxiter < 1:
            raise ValueError("maxiter must be >= 1")
        if self.inner not in ("direct", "iterative"):
            raise ValueError(f"unknown inner solve policy {self.inner!r}")


@dataclass
class SolveReport:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0
    message: str = ""

    @property
    def relative_residual(self) -> float:
        if not self.residuals or self.residuals[0] == 0:
            return 0.0
        return self.residuals[-1] / self.residuals[0]


def as_callable(op: Optional[Operator]) -> Callable[[np.ndarray], np.ndarray]:
    if op is None:
        return lambda x: x
    if callable(op) and not isinstance(op, (np.ndarray, sp.spmatrix, spla.LinearOperator)):
        return op
    if isinstance(op, spla.LinearOperator):
        return op.matvec
    return lambda x: op @ x


def fgmres(
    A: Operator,
    b: np.ndarray,
    M: Optional[Operator] = None,
    config: Optional[SolveConfig] = None,
    x0: Optional[np.ndarray] = None,
    tol: Optional[float] = None,
    maxiter: Optional[int] = None,
    weights: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, SolveReport]:
    """Right-preconditioned flexible GMRES.

    The preconditioned directions ``z_j = M(v_j)`` are stored so that ``M``
    may change between iterations.  Orthogonalization is modified
    Gram-Schmidt with a second pass whenever the new vector lost more than
    ``REORTH_THRESHOLD`` of its norm relative to the projections.  Stops when
    ``||W (b - A x)|| <= tol * ||W r0||``.

    Parameters
    ----------
    weights
        Positive diagonal ``W`` of the residual norm (default identity).
        GMRES then runs on ``W A x = W b`` with preconditioner ``M W^{-1}``,
        which leaves the solution unchanged.
    """
    config = config or SolveConfig()
    tol = config.tol if tol is None else tol
    maxiter = config.maxiter if maxiter is None else maxiter
    Aop, Mop = as_callable(A), as_callable(M)
    if weights is not None:
        W = np.asarray(weights, dtype=float)
        if np.any(W <= 0):
            raise ValueError("residual weights must be positive")
        A0, M0 = Aop, Mop
        Aop = lambda x: W * A0(x)  # noqa: E731
        Mop = lambda r: M0(r / W)  # noqa: E731
        b = W * np.asarray(b, dtype=float)
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - Aop(x) if x0 is not None else b.copy()
    beta = np.linalg.norm(r)
    report = SolveReport(residuals=[beta])
    if beta == 0.0:
        report.converged = True
        report.wall_time = time.perf_counter() - t0
        return x, report
    target = tol * beta

    V = np.zeros((maxiter + 1, n))
    Z = np.zeros((maxiter, n))
    H = np.zeros((maxiter + 1, maxiter))
    cs = np.zeros(maxiter)
    sn = np.zeros(maxiter)
    g = np.zeros(maxiter + 1)
    g[0] = beta
    V[0] = r / beta
    k = 0
    for j in range(maxiter):
        Z[j] = Mop(V[j])
        w = Aop(Z[j])
        wnorm0 = np.linalg.norm(w)
        for i in range(j + 1):
            H[i, j] = V[i] @ w
            w = w - H[i, j] * V[i]
        wnorm = np.linalg.norm(w)
        if wnorm < (1.0 - REORTH_THRESHOLD) * wnorm0 or wnorm < REORTH_THRESHOLD * wnorm0:
            for i in range(j + 1):
                c = V[i] @ w
                H[i, j] += c
                w = w - c * V[i]
            wnorm = np.linalg.norm(w)
        H[j + 1, j] = wnorm
        breakdown = wnorm <= 1e-14 * max(wnorm0, 1.0)
        if not breakdown:
            V[j + 1] = w / wnorm
        # apply previous rotations
        for i in range(j):
            hi, hi1 = H[i, j], H[i + 1, j]
            H[i, j] = cs[i] * hi + sn[i] * hi1
            H[i + 1, j] = -sn[i] * hi + cs[i] * hi1
        denom = np.hypot(H[j, j], H[j + 1, j])
        if denom == 0.0:
            cs[j], sn[j] = 1.0, 0.0
        else:
            cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
        H[j, j] = denom
        H[j + 1, j] = 0.0
        g[j + 1] = -sn[j] * g[j]
        g[j] = cs[j] * g[j]
        k = j + 1
        report.residuals.append(abs(g[j + 1]))
        if abs(g[j + 1]) <= target or breakdown:
            break
    y = sla.solve_triangular(H[:k, :k], g[:k]) if k else np.zeros(0)
    x = x + Z[:k].T @ y
    report.iterations = k
    true_res = np.linalg.norm(b - Aop(x))
    report.converged = bool(true_res <= target * (1.0 + 1e-6) or report.residuals[-1] <= target)
    report.message = "converged" if report.converged else f"not converged in {k} iterations"
    report.wall_time = time.perf_counter() - t0
    return x, report


class IndefiniteMatrixError(RuntimeError):
    """Raised when CG meets a direction of non-positive curvature."""


def cg(
    A: Operator,
    b: np.ndarray,
    tol: float = 1e-10,
    maxiter: Optional[int] = None,
    jacobi: Optional[np.ndarray] = None,
    nullspace: Optional[np.ndarray] = None,
    x0: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, SolveReport]:
    """Preconditioned conjugate gradients.

    Parameters
    ----------
    jacobi
        Diagonal of ``A`` for Jacobi preconditioning (optional).
    nullspace
        A single null vector (e.g. constants); it is projected out of the
        right-hand side and every iterate, which solves the singular
        consistent problem for the representative orthogonal to it.

    Raises
    ------
    IndefiniteMatrixError
        On negative or zero curvature ``p^T A p <= 0``.
    """
    Aop = as_callable(A)
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    maxiter = 10 * n if maxiter is None else maxiter

    if nullspace is not None:
        z0 = np.asarray(nullspace, dtype=float)
        z0 = z0 / np.linalg.norm(z0)
        project = lambda v: v - (z0 @ v) * z0  # noqa: E731
    else:
        project = lambda v: v  # noqa: E731
    dinv = None if jacobi is None else 1.0 / np.where(jacobi == 0, 1.0, jacobi)
    precond = (lambda v: v) if dinv is None else (lambda v: project(dinv * v))

    b = project(b)
    x = np.zeros(n) if x0 is None else project(np.array(x0, dtype=float))
    r = b - Aop(x)
    bnorm = np.linalg.norm(b)
    report = SolveReport(residuals=[np.linalg.norm(r)])
    if bnorm == 0.0:
        report.converged = True
        return np.zeros(n), report
    z = precond(r)
    p = z.copy()
    rz = r @ z
    for k in range(1, maxiter + 1):
        Ap = Aop(p)
        curv = p @ Ap
        if curv <= 0.0:
            raise IndefiniteMatrixError(f"non-positive curvature {curv:.3e} at iteration {k}")
        a = rz / curv
        x += a * p
        r -= a * Ap
        rn = np.linalg.norm(r)
        report.residuals.append(rn)
        report.iterations = k
        if rn <= tol * bnorm:
            report.converged = True
            break
        z = precond(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    report.wall_time = time.perf_counter() - t0
    report.message = "converged" if report.converged else "maxiter reached"
    return project(x), report


class SingularMatrixError(RuntimeError):
    pass


def _pinned(A, pin):
    """Replace rows and columns of ``pin`` by the identity."""
    mask = np.ones(A.shape[0])
    mask[np.atleast_1d(pin)] = 0.0
    D = sp.diags(mask)
    return (D @ A @ D + sp.diags(1.0 - mask)).tocsc()


def direct_solve(A, b, pin=None) -> np.ndarray:
    """Sparse (or dense) direct solve.

    ``pin`` lists DOFs fixed to zero, which turns a singular system with a
    declared null space into a nonsingular one (the pinned row/column is
    replaced by the identity).
    """
    b = np.asarray(b, dtype=float)
    if pin is not None and len(np.atleast_1d(pin)):
        pins = np.atleast_1d(pin)
        A = _pinned(sp.csr_matrix(A), pins)
        b = b.copy()
        b[pins] = 0.0
    if sp.issparse(A):
        try:
            lu = spla.splu(sp.csc_matrix(A))
        except RuntimeError as err:
            raise SingularMatrixError(str(err)) from err
        x = lu.solve(b)
    else:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", sla.LinAlgWarning)
                x = sla.solve(np.asarray(A), b)
        except (sla.LinAlgError, sla.LinAlgWarning) as err:
            raise SingularMatrixError(str(err)) from err
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("direct solve produced non-finite values")
    return x

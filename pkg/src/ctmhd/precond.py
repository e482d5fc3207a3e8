"""Augmented-Lagrangian block preconditioner for the coupled MHD system.

The practical preconditioner is the block upper-triangular matrix ::

    P = [ C^   2G^T  K     .      .    .         ]
        [ .   -L_phi .     .      .    .         ]
        [ .    .     H^    2D^T   J^T  .         ]
        [ .    .     .    -L_r    .    .         ]
        [ .    .     .     .      S_u  B^T       ]
        [ .    .     .     .      .   -M_p/(1/Re+alpha) ]

with the mass-augmented blocks ``C^ = C + M_A`` and
``H^ = HH + kappa/Rm M_H``.  :func:`apply_preconditioner` performs the
backward substitution; each diagonal block is inverted either by a sparse
factorization or by an inner Krylov solve to relative tolerance ``inner_tol``.

All operators here act on free-DOF vectors of a :class:`BlockSystem`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import VARIABLES, BlockSystem, Params, StaticBlocks, assemble_coupling_mass, curl_field
from .krylov import SolveConfig, cg

DIRECT_DOF_LIMIT = 400_000


class PreconditionerError(RuntimeError):
    """An inner block factorization or solve failed; ``block`` names it."""

    def __init__(self, block: str, msg: str):
        super().__init__(f"[{block}] {msg}")
        self.block = block


def spd_factor(A: sp.spmatrix, name: str = "block") -> Callable[[np.ndarray], np.ndarray]:
    """Factorize a symmetric positive definite sparse matrix.

    A symmetric-mode LU without pivoting is an LDL^T factorization in
    disguise; a non-positive pivot therefore certifies that ``A`` is not SPD.
    """
    A = sp.csc_matrix(A)
    if A.shape[0] == 0:
        return lambda b: np.zeros(0)
    asym = abs(A - A.T).max() if A.nnz else 0.0
    if asym > 1e-10 * max(abs(A).max(), 1e-300):
        raise PreconditionerError(name, f"matrix is not symmetric (asymmetry {asym:.2e})")
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options=dict(SymmetricMode=True))
    except RuntimeError as err:
        raise PreconditionerError(name, f"factorization failed: {err}") from err
    d = lu.U.diagonal()
    if np.any(d <= 0.0):
        raise PreconditionerError(name, "matrix is not positive definite")
    return lu.solve


def lu_factor(A: sp.spmatrix, name: str = "block") -> Callable[[np.ndarray], np.ndarray]:
    """LU of a structurally symmetric, diagonally strong matrix.

    A symmetric fill-reducing ordering with threshold pivoting on the
    diagonal is several times faster than column ordering for the velocity
    block; plain ``splu`` is the fallback.
    """
    A = sp.csc_matrix(A)
    if A.shape[0] == 0:
        return lambda b: np.zeros(0)
    try:
        return spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1,
                         options=dict(SymmetricMode=True)).solve
    except RuntimeError:
        pass
    try:
        return spla.splu(A).solve
    except RuntimeError as err:
        raise PreconditionerError(name, f"factorization failed: {err}") from err


def _iterative_spd(A, tol: float, name: str, nullspace=None):
    A = sp.csr_matrix(A)
    diag = A.diagonal()

    def solve(b):
        if A.shape[0] == 0:
            return np.zeros(0)
        x, rep = cg(A, b, tol=tol, jacobi=diag, nullspace=nullspace, maxiter=10 * A.shape[0] + 100)
        return x

    return solve


def _iterative_general(A, tol: float, name: str):
    A = sp.csc_matrix(A)
    if A.shape[0] == 0:
        return lambda b: np.zeros(0)
    try:
        ilu = spla.spilu(A, drop_tol=1e-4, fill_factor=10)
        M = spla.LinearOperator(A.shape, ilu.solve)
    except RuntimeError:
        M = None

    def solve(b):
        x, info = spla.gmres(A, b, rtol=tol, atol=0.0, M=M, restart=200, maxiter=10)
        if info < 0:
            raise PreconditionerError(name, f"inner GMRES breakdown (info={info})")
        return x

    return solve


@dataclass
class Preconditioner:
    """Assembled blocks of ``P`` restricted to free DOFs plus inner solvers."""

    blocks: dict  # C_hat, G, K, L_phi, H_hat, D, J, L_r, S_u, F, B, M_p
    pressure_scale: float  # (1/Re + alpha)
    sizes: list
    inner: str = "direct"
    inner_tol: float = 1e-3
    phi_neumann: bool = False
    solvers: dict = field(default_factory=dict, repr=False)
    variant: str = "S_u"

    def __post_init__(self):
        if not self.solvers:
            self.solvers = self._make_solvers()

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def shape(self):
        n = int(self.offsets[-1])
        return (n, n)

    def _make_solvers(self) -> dict:
        b = self.blocks
        direct = self.inner == "direct"
        s = {}
        mp = b["M_p"].diagonal()
        s["M_p"] = lambda r: r / mp
        null_phi = np.ones(b["L_phi"].shape[0]) if self.phi_neumann else None
        if direct:
            s["C_hat"] = spd_factor(b["C_hat"], "C_hat")
            s["H_hat"] = spd_factor(b["H_hat"], "H_hat")
            s["L_r"] = spd_factor(b["L_r"], "L_r")
            if self.phi_neumann and b["L_phi"].shape[0]:
                pinned = b["L_phi"].tolil(copy=True)
                pinned[0, :] = 0.0
                pinned[:, 0] = 0.0
                pinned[0, 0] = 1.0
                fac = spd_factor(pinned.tocsc(), "L_phi")

                def lphi(r, fac=fac):
                    r = r - r.mean()
                    r[0] = 0.0
                    x = fac(r)
                    return x - x.mean()

                s["L_phi"] = lphi
            else:
                s["L_phi"] = spd_factor(b["L_phi"], "L_phi")
            s["S_u"] = lu_factor(b["S_u"], "S_u")
        else:
            tol = self.inner_tol
            s["C_hat"] = _iterative_spd(b["C_hat"], tol, "C_hat")
            s["H_hat"] = _iterative_spd(b["H_hat"], tol, "H_hat")
            s["L_r"] = _iterative_spd(b["L_r"], tol, "L_r")
            s["L_phi"] = _iterative_spd(b["L_phi"], tol, "L_phi", nullspace=null_phi)
            s["S_u"] = _iterative_general(b["S_u"], tol, "S_u")
        return s

    def split(self, r):
        o = self.offsets
        return [r[o[k]:o[k + 1]] for k in range(6)]

    def apply(self, r: np.ndarray) -> np.ndarray:
        return apply_preconditioner(self, r)

    __call__ = apply

    def as_linear_operator(self) -> spla.LinearOperator:
        return spla.LinearOperator(self.shape, matvec=self.apply, dtype=float)

    def matrix(self) -> sp.csr_matrix:
        """The block matrix ``P`` itself (for verification)."""
        b = self.blocks
        n = self.sizes
        grid = [[None] * 6 for _ in range(6)]
        grid[0][0] = b["C_hat"]
        grid[0][1] = 2.0 * b["G"].T
        grid[0][2] = b["K"]
        grid[1][1] = -b["L_phi"]
        grid[2][2] = b["H_hat"]
        grid[2][3] = 2.0 * b["D"].T
        grid[2][4] = b["J"].T
        grid[3][3] = -b["L_r"]
        grid[4][4] = b["S_u"]
        grid[4][5] = b["B"].T
        grid[5][5] = -b["M_p"] / self.pressure_scale
        for i in range(6):
            for j in range(6):
                if grid[i][j] is None and i == j:
                    grid[i][j] = sp.csr_matrix((n[i], n[j]))
        return sp.bmat(grid, format="csr")


def apply_preconditioner(P: Preconditioner, r: np.ndarray) -> np.ndarray:
    """Backward substitution with ``P``; residual ordered (A, phi, H, r, u, p)."""
    b, s = P.blocks, P.solvers
    rA, rphi, rH, rr, ru, rp = P.split(np.asarray(r, dtype=float))
    e_p = -P.pressure_scale * s["M_p"](rp)
    e_u = s["S_u"](ru - b["B"].T @ e_p)
    e_r = -s["L_r"](rr)
    e_H = s["H_hat"](rH - 2.0 * (b["D"].T @ e_r) - b["J"].T @ e_u)
    e_phi = -s["L_phi"](rphi)
    e_A = s["C_hat"](rA - 2.0 * (b["G"].T @ e_phi) - b["K"] @ e_H)
    return np.concatenate([e_A, e_phi, e_H, e_r, e_u, e_p])


def _free(system: BlockSystem, M, row: str, col: Optional[str] = None):
    col = col or row
    return sp.csr_matrix(M)[system.free_dofs(row)][:, system.free_dofs(col)]


def build_preconditioner(
    system: BlockSystem,
    static: StaticBlocks,
    A_prev: Optional[np.ndarray] = None,
    config: Optional[SolveConfig] = None,
    variant: str = "S_u",
) -> Preconditioner:
    """Assemble ``P`` for the Picard step described by ``system``.

    ``variant="F"`` drops the magnetic coupling term of ``S_u`` and uses the
    plain momentum block ``F`` instead.
    """
    config = config or SolveConfig()
    params: Params = system.params
    spaces = system.spaces
    blk = system.blocks
    S_u = blk["F"]
    if variant == "S_u" and A_prev is not None and np.any(A_prev):
        c = curl_field(spaces["A"], A_prev)
        S_u = S_u + assemble_coupling_mass(spaces["u"], c, params.kappa * params.Rm)
    elif variant not in ("S_u", "F"):
        raise ValueError(f"unknown preconditioner variant {variant!r}")
    blocks = {
        "C_hat": _free(system, static.C + static.M_A, "A"),
        "G": _free(system, blk["G"], "phi", "A"),
        "K": _free(system, blk["K"], "A", "H"),
        "L_phi": _free(system, static.L_phi, "phi"),
        "H_hat": _free(system, static.HH + (params.kappa / params.Rm) * static.M_H, "H"),
        "D": _free(system, blk["D"], "r", "H"),
        "J": _free(system, blk["J"], "u", "H"),
        "L_r": _free(system, static.L_r, "r"),
        "S_u": _free(system, S_u, "u"),
        "F": _free(system, blk["F"], "u"),
        "B": _free(system, blk["B"], "p", "u"),
        "M_p": _free(system, static.M_p, "p"),
    }
    return Preconditioner(
        blocks=blocks,
        pressure_scale=1.0 / params.Re + params.alpha,
        sizes=system.sizes(True),
        inner=config.inner,
        inner_tol=config.inner_tol,
        phi_neumann=system.phi_neumann,
        variant=variant,
    )


def build_F_only_variant(P: Preconditioner) -> Preconditioner:
    """Copy of ``P`` whose velocity block is the plain momentum matrix ``F``.

    Every other block and inner solver is shared with ``P``.
    """
    blocks = dict(P.blocks)
    blocks["S_u"] = blocks["F"]
    solvers = dict(P.solvers)
    if P.inner == "direct":
        solvers["S_u"] = lu_factor(blocks["S_u"], "S_u")
    else:
        solvers["S_u"] = _iterative_general(blocks["S_u"], P.inner_tol, "S_u")
    return replace(P, blocks=blocks, solvers=solvers, variant="F")


# ---------------------------------------------------------------------------
# ideal factorization (dense, small meshes only)
# ---------------------------------------------------------------------------
def ideal_factors(system: BlockSystem, static: StaticBlocks, pin_pressure: int = 0):
    """Dense ``A``, ``E`` and ``U`` of the exact block factorization ``A = E L U``.

    One pressure DOF (and one phi DOF for natural A conditions) is removed to
    make the coupled matrix nonsingular.  Returns ``(A, E, U, sizes)`` with
    dense arrays.
    """
    keep = {v: np.arange(len(system.free_dofs(v))) for v in VARIABLES}
    keep["p"] = np.delete(keep["p"], pin_pressure)
    if system.phi_neumann:
        keep["phi"] = np.delete(keep["phi"], 0)

    def blk(M, row, col=None):
        col = col or row
        out = _free(system, M, row, col)[keep[row]][:, keep[col]]
        return out.toarray()

    b = system.blocks
    C, G, K = blk(b["C"], "A"), blk(b["G"], "phi", "A"), blk(b["K"], "A", "H")
    HH, D, J = blk(b["HH"], "H"), blk(b["D"], "r", "H"), blk(b["J"], "u", "H")
    F, B = blk(b["F"], "u"), blk(b["B"], "p", "u")
    Lphi, Lr = blk(static.L_phi, "phi"), blk(static.L_r, "r")
    inv = np.linalg.inv
    solve = np.linalg.solve

    Ct = C + G.T @ solve(Lphi, G)
    Ht = HH + D.T @ solve(Lr, D)
    S_phi = G @ solve(Ct, G.T)
    S_r = D @ solve(Ht, D.T)
    X45 = -D @ solve(Ht, J.T)
    Ft = F + J @ solve(Ht, J.T) - X45.T @ solve(S_r, X45)
    S_p = B @ solve(Ft, B.T)
    sizes = [len(keep[v]) for v in VARIABLES]
    Z = lambda i, j: np.zeros((sizes[i], sizes[j]))  # noqa: E731
    I = lambda i: np.eye(sizes[i])  # noqa: E731
    A = np.block([
        [C, G.T, K, Z(0, 3), Z(0, 4), Z(0, 5)],
        [G, Z(1, 1), Z(1, 2), Z(1, 3), Z(1, 4), Z(1, 5)],
        [Z(2, 0), Z(2, 1), HH, D.T, J.T, Z(2, 5)],
        [Z(3, 0), Z(3, 1), D, Z(3, 3), Z(3, 4), Z(3, 5)],
        [Z(4, 0), Z(4, 1), -J, Z(4, 3), F, B.T],
        [Z(5, 0), Z(5, 1), Z(5, 2), Z(5, 3), B, Z(5, 5)],
    ])
    E = np.block([
        [I(0), -G.T @ inv(Lphi) if sizes[1] else Z(0, 1), Z(0, 2), Z(0, 3), Z(0, 4), Z(0, 5)],
        [Z(1, 0), I(1), Z(1, 2), Z(1, 3), Z(1, 4), Z(1, 5)],
        [Z(2, 0), Z(2, 1), I(2), -D.T @ inv(Lr) if sizes[3] else Z(2, 3), Z(2, 4), Z(2, 5)],
        [Z(3, 0), Z(3, 1), Z(3, 2), I(3), Z(3, 4), Z(3, 5)],
        [Z(4, 0), Z(4, 1), Z(4, 2), Z(4, 3), I(4), Z(4, 5)],
        [Z(5, 0), Z(5, 1), Z(5, 2), Z(5, 3), Z(5, 4), I(5)],
    ])
    U = np.block([
        [Ct, G.T, K, Z(0, 3), Z(0, 4), Z(0, 5)],
        [Z(1, 0), -S_phi, -G @ solve(Ct, K), Z(1, 3), Z(1, 4), Z(1, 5)],
        [Z(2, 0), Z(2, 1), Ht, D.T, J.T, Z(2, 5)],
        [Z(3, 0), Z(3, 1), Z(3, 2), -S_r, X45, Z(3, 5)],
        [Z(4, 0), Z(4, 1), Z(4, 2), Z(4, 3), Ft, B.T],
        [Z(5, 0), Z(5, 1), Z(5, 2), Z(5, 3), Z(5, 4), -S_p],
    ])
    return A, E, U, sizes


def ideal_preconditioned_spectrum(system: BlockSystem, static: StaticBlocks):
    """Check the ideal factorization and return its preconditioned eigenvalues.

    ``A (EU)^{-1} = E L E^{-1}`` with ``L`` block unit lower triangular.  ``L``
    is recovered as ``E^{-1} A (EU)^{-1} E``; it is not diagonalizable in
    general, so the eigenvalues are read from its diagonal blocks.  Returns
    ``(eigenvalues, max deviation of L from block unit-lower-triangular)``.
    """
    A, E, U, sizes = ideal_factors(system, static)
    EU = E @ U
    L = np.linalg.solve(E, A) @ np.linalg.solve(EU, E)  # E^{-1} A (EU)^{-1} E
    off = np.concatenate([[0], np.cumsum(sizes)])
    dev = 0.0
    eigs = []
    for i in range(6):
        si = slice(off[i], off[i + 1])
        if sizes[i] == 0:
            continue
        dii = L[si, si]
        dev = max(dev, np.abs(dii - np.eye(sizes[i])).max())
        eigs.append(sla.eigvals(dii))
        for j in range(i + 1, 6):
            sj = slice(off[j], off[j + 1])
            if sizes[j]:
                dev = max(dev, np.abs(L[si, sj]).max())
    scale = max(1.0, np.abs(L).max())
    return np.concatenate(eigs), dev / scale


__all__ = [
    "Preconditioner", "PreconditionerError", "build_preconditioner", "apply_preconditioner",
    "build_F_only_variant", "ideal_factors", "ideal_preconditioned_spectrum", "spd_factor",
]

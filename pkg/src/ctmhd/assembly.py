"""Sparse assembly of all bilinear and trilinear forms of the MHD system.

Matrices follow the ``M[test, trial]`` convention.  Rectangular blocks are
named after the row variable of the 6x6 layout (A, phi, H, r, u, p)::

    [ C    G^T  K    .    .    .  ] [A  ]
    [ G    .    .    .    .    .  ] [phi]
    [ .    .    HH   D^T  J^T  .  ] [H  ]
    [ .    .    D    .    .    .  ] [r  ]
    [ .    .   -J    .    F    B^T] [u  ]
    [ .    .    .    .    B    .  ] [p  ]

with ``C = (curl, curl)`` on Dh, ``G[s, d] = (d, grad s)``,
``K[d, w] = -(w, curl d)``, ``HH = kappa/Rm (curl, curl)`` on Wh,
``D[s, w] = (w, grad s)``, ``J[v, w] = kappa (curl A* x v, curl w)``,
``F = A_h + alpha (div, div) + O_h(u*)`` and ``B[q, v] = -(q, div v)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.io
import scipy.sparse as sp

from .fespace import FESpace, SpaceKind, face_points, make_spaces, sign_split_rule
from .mesh import TetMesh
from .quadrature import tet_rule, tri_rule

VOLUME_DEGREE = 4
FACE_DEGREE = 3
SOURCE_DEGREE = 6

VARIABLES = ("A", "phi", "H", "r", "u", "p")


@dataclass(frozen=True)
class Params:
    """Dimensionless parameters of the stationary MHD model."""

    Re: float = 1.0
    Rm: float = 1.0
    kappa: float = 1.0
    gamma: float = 10.0
    alpha: float = 1.0

    def __post_init__(self):
        for name in ("Re", "Rm", "kappa", "gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


def _scatter(local: np.ndarray, rows: np.ndarray, cols: np.ndarray, shape) -> sp.csr_matrix:
    """Sum per-element blocks ``local`` (N, nr, nc) into a CSR matrix."""
    n, nr, nc = local.shape
    R = np.broadcast_to(rows[:, :, None], (n, nr, nc)).ravel()
    C = np.broadcast_to(cols[:, None, :], (n, nr, nc)).ravel()
    A = sp.coo_matrix((local.ravel(), (R, C)), shape=shape).tocsr()
    A.sum_duplicates()
    return A


def _vol_rule(degree=VOLUME_DEGREE):
    return tet_rule(degree)


def _qweights(mesh: TetMesh, rule) -> np.ndarray:
    return mesh.volumes[:, None] * rule.unit_weights[None, :]


# ---------------------------------------------------------------------------
# volume forms
# ---------------------------------------------------------------------------
def assemble_mass(space: FESpace, scale: float = 1.0) -> sp.csr_matrix:
    """L2 mass matrix of ``space``."""
    mesh = space.mesh
    rule = _vol_rule()
    w = _qweights(mesh, rule)
    phi = space.values(rule.points)
    if space.kind.is_vector:
        loc = np.einsum("tq,tqmk,tqnk->tmn", w, phi, phi)
    else:
        loc = np.einsum("tq,tqm,tqn->tmn", w, phi, phi)
    cd = space.cell_dofs
    return _scatter(scale * loc, cd, cd, (space.ndofs, space.ndofs))


def assemble_curlcurl(space: FESpace, scale: float = 1.0) -> sp.csr_matrix:
    """``scale * (curl u, curl v)`` on an edge space."""
    c = space.curls()
    loc = scale * space.mesh.volumes[:, None, None] * np.einsum("tmk,tnk->tmn", c, c)
    cd = space.cell_dofs
    return _scatter(loc, cd, cd, (space.ndofs, space.ndofs))


def assemble_scalar_stiffness(space: FESpace, scale: float = 1.0) -> sp.csr_matrix:
    """``scale * (grad s, grad t)`` on a P2 space (no boundary treatment)."""
    rule = _vol_rule()
    w = _qweights(space.mesh, rule)
    g = space.gradients(rule.points)
    loc = scale * np.einsum("tq,tqml,tqnl->tmn", w, g, g)
    cd = space.cell_dofs
    return _scatter(loc, cd, cd, (space.ndofs, space.ndofs))


def assemble_grad(vector: FESpace, scalar: FESpace) -> sp.csr_matrix:
    """``M[s, d] = (d, grad s)``; the blocks G (Dh, Yh) and D (Wh, Sh)."""
    rule = _vol_rule()
    w = _qweights(vector.mesh, rule)
    v = vector.values(rule.points)
    g = scalar.gradients(rule.points)
    loc = np.einsum("tq,tqnk,tqmk->tmn", w, v, g)
    return _scatter(loc, scalar.cell_dofs, vector.cell_dofs, (scalar.ndofs, vector.ndofs))


def assemble_mixed_K(Wh: FESpace, Dh: FESpace) -> sp.csr_matrix:
    """``K[d, w] = -(w, curl d)``."""
    rule = _vol_rule()
    w = _qweights(Wh.mesh, rule)
    mean = np.einsum("tq,tqnk->tnk", w, Wh.values(rule.points))  # integrals of basis
    loc = -np.einsum("tmk,tnk->tmn", Dh.curls(), mean)
    return _scatter(loc, Dh.cell_dofs, Wh.cell_dofs, (Dh.ndofs, Wh.ndofs))


def assemble_B(Vh: FESpace, Qh: FESpace) -> sp.csr_matrix:
    """``B[q, v] = -(q, div v)``."""
    loc = -(Vh.mesh.volumes[:, None] * Vh.divergences())[:, None, :]
    return _scatter(loc, Qh.cell_dofs, Vh.cell_dofs, (Qh.ndofs, Vh.ndofs))


def assemble_graddiv(Vh: FESpace, alpha: float) -> sp.csr_matrix:
    """``alpha * (div u, div v)``."""
    d = Vh.divergences()
    loc = alpha * Vh.mesh.volumes[:, None, None] * d[:, :, None] * d[:, None, :]
    cd = Vh.cell_dofs
    return _scatter(loc, cd, cd, (Vh.ndofs, Vh.ndofs))


def curl_field(Dh: FESpace, A: Optional[np.ndarray]) -> np.ndarray:
    """Piecewise-constant curl of an edge field, zero when ``A`` is None."""
    if A is None:
        return np.zeros((Dh.mesh.n_tets, 3))
    return Dh.evaluate_curl(A)


def assemble_L(Vh: FESpace, Wh: FESpace, curlA: np.ndarray, kappa: float) -> sp.csr_matrix:
    """``J[v, w] = kappa (curl A x v, curl w)`` for a frozen piecewise-constant ``curl A``."""
    rule = _vol_rule()
    w = _qweights(Vh.mesh, rule)
    vint = np.einsum("tq,tqmk->tmk", w, Vh.values(rule.points))
    cross = np.cross(curlA[:, None, :], vint)
    loc = kappa * np.einsum("tmk,tnk->tmn", cross, Wh.curls())
    return _scatter(loc, Vh.cell_dofs, Wh.cell_dofs, (Vh.ndofs, Wh.ndofs))


def assemble_coupling_mass(Vh: FESpace, curlA: np.ndarray, scale: float) -> sp.csr_matrix:
    """``scale * (c x u, c x v)`` with ``c`` piecewise constant."""
    rule = _vol_rule()
    w = _qweights(Vh.mesh, rule)
    cv = np.cross(curlA[:, None, None, :], Vh.values(rule.points))
    loc = scale * np.einsum("tq,tqmk,tqnk->tmn", w, cv, cv)
    cd = Vh.cell_dofs
    return _scatter(loc, cd, cd, (Vh.ndofs, Vh.ndofs))


# ---------------------------------------------------------------------------
# face forms on Vh
# ---------------------------------------------------------------------------
def _face_tables(Vh: FESpace, rule, fd: Optional[dict] = None):
    """Jump values and averaged normal fluxes of the BDM basis on all faces.

    Returns the face data dict plus ``jump`` (F, Q, 24, 3), ``flux`` (F, 24, 3)
    and ``dofs`` (F, 24).  On boundary faces the K- half is zero.  ``fd``
    replaces the default face data built from ``rule``.
    """
    mesh = Vh.mesh
    if fd is None:
        fd = face_points(mesh, rule)
    n = fd["normals"]
    vp = Vh.values(fd["bary_plus"], fd["cells_plus"])
    vm = Vh.values(fd["bary_minus"], fd["cells_minus"])
    gp = Vh.gradients(cells=fd["cells_plus"])
    gm = Vh.gradients(cells=fd["cells_minus"])
    interior = fd["valid_minus"]
    s = np.where(interior, 1.0, 0.0)
    half = np.where(interior, 0.5, 1.0)
    jump = np.concatenate([vp, -s[:, None, None, None] * vm], axis=2)
    flux = np.concatenate(
        [half[:, None, None] * np.einsum("fmkl,fl->fmk", gp, n),
         (0.5 * s)[:, None, None] * np.einsum("fmkl,fl->fmk", gm, n)],
        axis=1,
    )
    dofs = np.hstack([Vh.cell_dofs[fd["cells_plus"]], Vh.cell_dofs[fd["cells_minus"]]])
    return fd, jump, flux, dofs


def assemble_Ah(Vh: FESpace, Re: float, gamma: float) -> sp.csr_matrix:
    """Symmetric interior-penalty discretization of ``-(1/Re) Laplace``."""
    mesh = Vh.mesh
    g = Vh.gradients()
    vol = (1.0 / Re) * mesh.volumes[:, None, None] * np.einsum("tmkl,tnkl->tmn", g, g)
    cd = Vh.cell_dofs
    A = _scatter(vol, cd, cd, (Vh.ndofs, Vh.ndofs))

    fd, jump, flux, dofs = _face_tables(Vh, tri_rule(FACE_DEGREE))
    w = fd["weights"]
    pen = gamma / (Re * mesh.face_diameters)
    loc = pen[:, None, None] * np.einsum("fq,fqmk,fqnk->fmn", w, jump, jump)
    jint = np.einsum("fq,fqmk->fmk", w, jump)
    cons = np.einsum("fnk,fmk->fmn", flux, jint)  # {grad u n}.[v], trial n, test m
    loc -= (1.0 / Re) * (cons + cons.transpose(0, 2, 1))
    return A + _scatter(loc, dofs, dofs, (Vh.ndofs, Vh.ndofs))


def assemble_dg_gram(Vh: FESpace) -> sp.csr_matrix:
    """Gram matrix of the dg norm on ``Vh``.

    Broken ``H^1`` seminorm plus ``sum_F h_F^-1 ||[v]||^2``, where the jump on
    a boundary face is the one-sided trace.
    """
    mesh = Vh.mesh
    g = Vh.gradients()
    vol = mesh.volumes[:, None, None] * np.einsum("tmkl,tnkl->tmn", g, g)
    cd = Vh.cell_dofs
    G = _scatter(vol, cd, cd, (Vh.ndofs, Vh.ndofs))
    fd, jump, _, dofs = _face_tables(Vh, tri_rule(FACE_DEGREE))
    loc = (1.0 / mesh.face_diameters)[:, None, None] * np.einsum(
        "fq,fqmk,fqnk->fmn", fd["weights"], jump, jump)
    return G + _scatter(loc, dofs, dofs, (Vh.ndofs, Vh.ndofs))


def _upwind_face_points(Vh: FESpace, w: np.ndarray, rule, faces=None) -> dict:
    """Face data on pieces of constant sign of ``w.n_F``.

    Adds ``outflow`` (F, Q), True where ``w`` leaves the K+ cell.
    """
    mesh = Vh.mesh
    faces = np.arange(mesh.n_faces) if faces is None else np.asarray(faces)
    corners = np.broadcast_to(np.eye(3), (len(faces), 3, 3))
    fv = face_points(mesh, None, faces, corners, np.full((len(faces), 3), 1.0 / 3.0))
    wn = np.einsum("fqk,fk->fq", Vh.evaluate(w, fv["bary_plus"], fv["cells_plus"]), fv["normals"])
    pts, wts, outflow = sign_split_rule(wn, rule)
    fd = face_points(mesh, None, faces, pts, wts)
    fd["outflow"] = outflow
    return fd


def assemble_Oh(Vh: FESpace, w: Optional[np.ndarray]) -> sp.csr_matrix:
    """Upwind discretization of the convection term with frozen velocity ``w``.

    Volume part ``-(u, (div w) v + (grad v) w)`` and face part
    ``sum_F int (w.n_F) u_up . [v]``; on inflow boundary faces the upwind value
    is boundary data and does not enter the matrix.  ``w.n_F`` is linear on
    each face, so faces are split along its zero line and both pieces are
    integrated exactly.
    """
    mesh = Vh.mesh
    if w is None or not np.any(w):
        return sp.csr_matrix((Vh.ndofs, Vh.ndofs))
    rule = _vol_rule()
    qw = _qweights(mesh, rule)
    phi = Vh.values(rule.points)
    wq = Vh.evaluate(w, rule.points)
    divw = Vh.evaluate_div(w)
    g = Vh.gradients()
    test = divw[:, None, None, None] * phi + np.einsum("tmkl,tql->tqmk", g, wq)
    vol = -np.einsum("tq,tqnk,tqmk->tmn", qw, phi, test)
    cd = Vh.cell_dofs
    O = _scatter(vol, cd, cd, (Vh.ndofs, Vh.ndofs))

    fd = _upwind_face_points(Vh, w, tri_rule(FACE_DEGREE))
    fd, jump, _, dofs = _face_tables(Vh, None, fd)
    n = fd["normals"]
    wn = np.einsum("fqk,fk->fq", Vh.evaluate(w, fd["bary_plus"], fd["cells_plus"]), n)
    vp = Vh.values(fd["bary_plus"], fd["cells_plus"])
    vm = Vh.values(fd["bary_minus"], fd["cells_minus"])
    interior = fd["valid_minus"]
    up_plus = fd["outflow"]
    up_minus = (~up_plus) & interior[:, None]
    # upwind trial trace on the 24 face DOFs
    zero = np.zeros_like(vp)
    trial = np.concatenate(
        [np.where(up_plus[:, :, None, None], vp, zero), np.where(up_minus[:, :, None, None], vm, zero)],
        axis=2,
    )
    loc = np.einsum("fq,fq,fqnk,fqmk->fmn", fd["weights"], wn, trial, jump)
    return O + _scatter(loc, dofs, dofs, (Vh.ndofs, Vh.ndofs))


def assemble_F(Vh: FESpace, params: Params, u_prev: Optional[np.ndarray]) -> sp.csr_matrix:
    """Momentum diagonal block ``A_h + alpha graddiv + O_h(u_prev)``."""
    return (
        assemble_Ah(Vh, params.Re, params.gamma)
        + assemble_graddiv(Vh, params.alpha)
        + assemble_Oh(Vh, u_prev)
    ).tocsr()


def assemble_Su(Vh: FESpace, Dh: FESpace, params: Params, u_prev=None, A_prev=None) -> sp.csr_matrix:
    """Velocity Schur surrogate: ``F`` plus ``kappa Rm (c x u, c x v)``, ``c = curl A_prev``."""
    F = assemble_F(Vh, params, u_prev)
    if A_prev is None or not np.any(A_prev):
        return F
    c = curl_field(Dh, A_prev)
    return (F + assemble_coupling_mass(Vh, c, params.kappa * params.Rm)).tocsr()


# ---------------------------------------------------------------------------
# right-hand sides
# ---------------------------------------------------------------------------
VectorField = Callable[[np.ndarray], np.ndarray]


def load_vector(space: FESpace, f: Optional[VectorField], degree: int = SOURCE_DEGREE) -> np.ndarray:
    """``(f, v)`` for every basis function of a vector space."""
    if f is None:
        return np.zeros(space.ndofs)
    mesh = space.mesh
    rule = tet_rule(degree)
    pts = mesh.map_points(rule.points)
    fv = np.asarray(f(pts.reshape(-1, 3)), dtype=float).reshape(pts.shape)
    loc = np.einsum("tq,tqk,tqmk->tm", _qweights(mesh, rule), fv, space.values(rule.points))
    return np.bincount(space.cell_dofs.ravel(), loc.ravel(), minlength=space.ndofs)


def boundary_velocity_rhs(
    Vh: FESpace, params: Params, g: Optional[VectorField], w: Optional[np.ndarray], degree: int = SOURCE_DEGREE
) -> np.ndarray:
    """Boundary-data contributions of the penalty, consistency and inflow terms."""
    mesh = Vh.mesh
    out = np.zeros(Vh.ndofs)
    if g is None:
        return out
    faces = np.flatnonzero(mesh.boundary_faces)
    convect = w is not None and np.any(w)
    if convect:
        fd = _upwind_face_points(Vh, w, tri_rule(degree), faces)
    else:
        fd = face_points(mesh, tri_rule(degree), faces)
    n = fd["normals"]
    K = fd["cells_plus"]
    pts = fd["points"]
    gv = np.asarray(g(pts.reshape(-1, 3)), dtype=float).reshape(pts.shape)
    phi = Vh.values(fd["bary_plus"], K)  # (F, Q, 12, 3)
    gradn = np.einsum("fmkl,fl->fmk", Vh.gradients(cells=K), n)
    wts = fd["weights"]
    pen = params.gamma / (params.Re * mesh.face_diameters[faces])
    loc = pen[:, None] * np.einsum("fq,fqk,fqmk->fm", wts, gv, phi)
    loc -= (1.0 / params.Re) * np.einsum("fq,fqk,fmk->fm", wts, gv, gradn)
    if convect:
        wn = np.einsum("fqk,fk->fq", Vh.evaluate(w, fd["bary_plus"], K), n)
        inflow = np.where(fd["outflow"], 0.0, wn)
        loc -= np.einsum("fq,fq,fqk,fqmk->fm", wts, inflow, gv, phi)
    return np.bincount(Vh.cell_dofs[K].ravel(), loc.ravel(), minlength=Vh.ndofs)


# ---------------------------------------------------------------------------
# problem data and block system
# ---------------------------------------------------------------------------
@dataclass
class ProblemData:
    """Sources and boundary data.

    ``u_bc``, ``H_bc``, ``A_bc`` are callables evaluated on the boundary; the
    first is imposed through strong normal DOFs plus the weak boundary-face
    terms, the other two by interpolation on boundary edges.  If ``A_bc`` is
    None the potential carries natural conditions and phi is determined up to
    a constant.
    """

    f: Optional[VectorField] = None
    g_H: Optional[VectorField] = None
    g_A: Optional[VectorField] = None
    u_bc: Optional[VectorField] = None
    H_bc: Optional[VectorField] = None
    A_bc: Optional[VectorField] = None
    name: str = "custom"

    @property
    def phi_neumann(self) -> bool:
        return self.A_bc is None


def _zero_field(x):
    return np.zeros_like(x)


def essential_values(spaces: dict, data: ProblemData) -> dict:
    """Essential DOF indices and values per variable."""
    out = {}
    u_bc = data.u_bc or _zero_field
    H_bc = data.H_bc or _zero_field
    Vh, Wh, Dh = spaces["u"], spaces["H"], spaces["A"]
    bu = Vh.boundary_dofs
    out["u"] = (bu, Vh.interpolate(u_bc)[bu])
    bH = Wh.boundary_dofs
    out["H"] = (bH, Wh.interpolate(H_bc)[bH])
    br = spaces["r"].boundary_dofs
    out["r"] = (br, np.zeros(len(br)))
    if data.A_bc is not None:
        bA = Dh.boundary_dofs
        out["A"] = (bA, Dh.interpolate(data.A_bc)[bA])
        bphi = spaces["phi"].boundary_dofs
        out["phi"] = (bphi, np.zeros(len(bphi)))
    else:
        out["A"] = (np.zeros(0, int), np.zeros(0))
        out["phi"] = (np.zeros(0, int), np.zeros(0))
    out["p"] = (np.zeros(0, int), np.zeros(0))
    return out


@dataclass
class StaticBlocks:
    """Blocks that do not depend on the Picard state."""

    C: sp.csr_matrix
    G: sp.csr_matrix
    K: sp.csr_matrix
    HH: sp.csr_matrix
    D: sp.csr_matrix
    B: sp.csr_matrix
    A_h: sp.csr_matrix
    graddiv: sp.csr_matrix
    M_A: sp.csr_matrix
    M_H: sp.csr_matrix
    M_u: sp.csr_matrix
    M_p: sp.csr_matrix
    L_phi: sp.csr_matrix
    L_r: sp.csr_matrix
    load_u: np.ndarray
    load_H: np.ndarray
    load_A: np.ndarray


def assemble_static(spaces: dict, params: Params, data: ProblemData) -> StaticBlocks:
    Dh, Yh, Wh, Sh, Vh, Qh = (spaces[k] for k in VARIABLES)
    return StaticBlocks(
        C=assemble_curlcurl(Dh),
        G=assemble_grad(Dh, Yh),
        K=assemble_mixed_K(Wh, Dh),
        HH=assemble_curlcurl(Wh, params.kappa / params.Rm),
        D=assemble_grad(Wh, Sh),
        B=assemble_B(Vh, Qh),
        A_h=assemble_Ah(Vh, params.Re, params.gamma),
        graddiv=assemble_graddiv(Vh, params.alpha),
        M_A=assemble_mass(Dh),
        M_H=assemble_mass(Wh),
        M_u=assemble_mass(Vh),
        M_p=assemble_mass(Qh),
        L_phi=assemble_scalar_stiffness(Yh),
        L_r=assemble_scalar_stiffness(Sh, params.Rm / params.kappa),
        load_u=load_vector(Vh, data.f),
        load_H=load_vector(Wh, data.g_H),
        load_A=load_vector(Dh, data.g_A),
    )


@dataclass
class BlockSystem:
    """Coupled linear system of one Picard step, before and after elimination."""

    spaces: dict
    params: Params
    blocks: dict  # full-size blocks keyed C, G, K, HH, D, J, F, B
    rhs: dict  # full-size segments keyed by variable
    essential: dict  # variable -> (dof indices, values)
    phi_neumann: bool = False
    _free: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for v in VARIABLES:
            n = self.spaces[v].ndofs
            mask = np.ones(n, dtype=bool)
            mask[self.essential[v][0]] = False
            self._free[v] = np.flatnonzero(mask)

    # -- layout ---------------------------------------------------------------
    def layout(self):
        """6x6 nested list of full-size blocks; ``None`` marks a zero block."""
        b = self.blocks
        return [
            [b["C"], b["G"].T, b["K"], None, None, None],
            [b["G"], None, None, None, None, None],
            [None, None, b["HH"], b["D"].T, b["J"].T, None],
            [None, None, b["D"], None, None, None],
            [None, None, -b["J"], None, b["F"], b["B"].T],
            [None, None, None, None, b["B"], None],
        ]

    def sizes(self, free: bool = True) -> list[int]:
        if free:
            return [len(self._free[v]) for v in VARIABLES]
        return [self.spaces[v].ndofs for v in VARIABLES]

    def offsets(self, free: bool = True) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes(free))])

    def free_dofs(self, var: str) -> np.ndarray:
        return self._free[var]

    def block(self, i: int, j: int, free: bool = True):
        blk = self.layout()[i][j]
        if blk is None:
            return None
        blk = sp.csr_matrix(blk)
        if free:
            blk = blk[self._free[VARIABLES[i]]][:, self._free[VARIABLES[j]]]
        return blk

    def full_matrix(self) -> sp.csr_matrix:
        sizes = self.sizes(False)
        grid = [[self._sized(self.layout()[i][j], sizes[i], sizes[j]) for j in range(6)] for i in range(6)]
        return sp.bmat(grid, format="csr")

    @staticmethod
    def _sized(blk, m, n):
        return blk if blk is not None else sp.csr_matrix((m, n))

    def matrix(self) -> sp.csr_matrix:
        """Coupled matrix restricted to free DOFs."""
        sizes = self.sizes(True)
        grid = [[self._sized(self.block(i, j), sizes[i], sizes[j]) for j in range(6)] for i in range(6)]
        return sp.bmat(grid, format="csr")

    def lifting(self) -> np.ndarray:
        """Full-length vector carrying the essential values and zeros elsewhere."""
        x = np.zeros(self.offsets(False)[-1])
        off = self.offsets(False)
        for k, v in enumerate(VARIABLES):
            idx, val = self.essential[v]
            x[off[k] + idx] = val
        return x

    def vector(self) -> np.ndarray:
        """Right-hand side on free DOFs with essential data eliminated.

        The pressure segment (and phi for natural A conditions) is projected
        onto the range of the singular operator by removing its mean.
        """
        off = self.offsets(False)
        b = np.concatenate([self.rhs[v] for v in VARIABLES])
        b = b - self.full_matrix() @ self.lifting()
        parts = []
        for k, v in enumerate(VARIABLES):
            seg = b[off[k]:off[k + 1]][self._free[v]]
            if v == "p" or (v == "phi" and self.phi_neumann):
                seg = seg - seg.mean()
            parts.append(seg)
        return np.concatenate(parts)

    def split(self, x_free: np.ndarray) -> dict:
        """Free-DOF vector -> dict of full-size segments including essential values."""
        off = self.offsets(True)
        out = {}
        for k, v in enumerate(VARIABLES):
            full = np.zeros(self.spaces[v].ndofs)
            idx, val = self.essential[v]
            full[idx] = val
            full[self._free[v]] = x_free[off[k]:off[k + 1]]
            out[v] = full
        return out

    def restrict(self, segments: dict) -> np.ndarray:
        return np.concatenate([np.asarray(segments[v])[self._free[v]] for v in VARIABLES])


def build_system(
    spaces: dict,
    params: Params,
    data: ProblemData,
    u_prev: Optional[np.ndarray] = None,
    A_prev: Optional[np.ndarray] = None,
    static: Optional[StaticBlocks] = None,
    essential: Optional[dict] = None,
) -> BlockSystem:
    """Assemble the Picard-linearized coupled system around ``(u_prev, A_prev)``."""
    static = static or assemble_static(spaces, params, data)
    essential = essential or essential_values(spaces, data)
    Vh, Wh, Dh = spaces["u"], spaces["H"], spaces["A"]
    J = assemble_L(Vh, Wh, curl_field(Dh, A_prev), params.kappa)
    F = (static.A_h + static.graddiv + assemble_Oh(Vh, u_prev)).tocsr()
    blocks = dict(C=static.C, G=static.G, K=static.K, HH=static.HH, D=static.D, J=J, F=F, B=static.B)
    rhs = assemble_rhs(spaces, params, data, u_prev, static)
    return BlockSystem(spaces, params, blocks, rhs, essential, data.phi_neumann)


def assemble_rhs(
    spaces: dict, params: Params, data: ProblemData, u_prev=None, static: Optional[StaticBlocks] = None
) -> dict:
    """Full-length right-hand side segments before elimination."""
    if static is not None:
        load_u, load_H, load_A = static.load_u, static.load_H, static.load_A
    else:
        load_u = load_vector(spaces["u"], data.f)
        load_H = load_vector(spaces["H"], data.g_H)
        load_A = load_vector(spaces["A"], data.g_A)
    b_u = load_u + boundary_velocity_rhs(spaces["u"], params, data.u_bc, u_prev)
    return {
        "A": np.array(load_A, dtype=float),
        "phi": np.zeros(spaces["phi"].ndofs),
        "H": np.array(load_H, dtype=float),
        "r": np.zeros(spaces["r"].ndofs),
        "u": b_u,
        "p": np.zeros(spaces["p"].ndofs),
    }


def export_matrix_market(matrix, path, comment: str = "") -> Path:
    """Write a sparse block to ``path`` in Matrix Market coordinate format."""
    path = Path(path)
    if path.suffix != ".mtx":
        path = path.with_name(path.name + ".mtx")
    path.parent.mkdir(parents=True, exist_ok=True)
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), comment=comment)
    return path

__all__ = [
    "Params", "ProblemData", "BlockSystem", "StaticBlocks", "VARIABLES",
    "assemble_mass", "assemble_curlcurl", "assemble_scalar_stiffness", "assemble_grad",
    "assemble_mixed_K", "assemble_B", "assemble_graddiv", "assemble_L", "assemble_coupling_mass",
    "assemble_Ah", "assemble_dg_gram", "assemble_Oh", "assemble_F", "assemble_Su", "load_vector",
    "boundary_velocity_rhs", "assemble_rhs", "assemble_static", "build_system",
    "essential_values", "export_matrix_market", "curl_field", "make_spaces", "SpaceKind",
]

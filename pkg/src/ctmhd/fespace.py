"""Finite element spaces on a :class:`~ctmhd.mesh.TetMesh`.

Six spaces are used by the solver:

========  ======================  =====================================
kind      family                  degrees of freedom
========  ======================  =====================================
``V``     BDM1, H(div)            3 normal moments per face
``W, D``  Nedelec 2nd kind, P1    2 tangential moments per edge
``Q``     P0                      1 per tet
``S, Y``  continuous P2           1 per vertex + 1 per edge
========  ======================  =====================================

The vector DOF functionals are defined with the *global* face normal / edge
tangent and with barycentric weights of the face's (edge's) vertices in
ascending global order, so a local functional is literally the global one and
no sign flips are needed when scattering.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .mesh import LOCAL_EDGES, LOCAL_FACES, TetMesh
from .quadrature import line_rule, tet_rule, tri_rule

INTERPOLATION_DEGREE = 8


class SpaceKind(str, Enum):
    V = "Vh"
    W = "Wh"
    D = "Dh"
    Q = "Qh"
    S = "Sh"
    Y = "Yh"

    @property
    def family(self) -> str:
        return {"V": "BDM1", "W": "NED2", "D": "NED2", "Q": "P0", "S": "P2", "Y": "P2"}[self.name]

    @property
    def is_vector(self) -> bool:
        return self.family in ("BDM1", "NED2")

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value in cls.__members__:
            return cls.__members__[value]
        return None


@dataclass(frozen=True, eq=False)
class DofMap:
    kind: SpaceKind
    ndofs: int
    cell_dofs: np.ndarray  # (T, nloc)
    boundary_dofs: np.ndarray  # DOFs attached to boundary entities

    @property
    def nloc(self) -> int:
        return self.cell_dofs.shape[1]


def dof_count(kind: SpaceKind | str, mesh: TetMesh) -> int:
    kind = SpaceKind(kind)
    fam = kind.family
    if fam == "BDM1":
        return 3 * mesh.n_faces
    if fam == "NED2":
        return 2 * mesh.n_edges
    if fam == "P2":
        return mesh.n_vertices + mesh.n_edges
    return mesh.n_tets


def _local_index(tets, vertex):
    """Position of global ``vertex`` (N,) inside rows of ``tets`` (N, 4)."""
    return np.argmax(tets == vertex[:, None], axis=1)


def _dofmap(mesh: TetMesh, kind: SpaceKind) -> DofMap:
    fam = kind.family
    if fam == "BDM1":
        cell = (3 * mesh.tet_faces[:, :, None] + np.arange(3)).reshape(-1, 12)
        bnd = (3 * np.flatnonzero(mesh.boundary_faces)[:, None] + np.arange(3)).ravel()
    elif fam == "NED2":
        cell = (2 * mesh.tet_edges[:, :, None] + np.arange(2)).reshape(-1, 12)
        bnd = (2 * np.flatnonzero(mesh.boundary_edges)[:, None] + np.arange(2)).ravel()
    elif fam == "P2":
        cell = np.hstack([mesh.tets, mesh.n_vertices + mesh.tet_edges])
        bnd = np.concatenate(
            [np.flatnonzero(mesh.boundary_vertices), mesh.n_vertices + np.flatnonzero(mesh.boundary_edges)]
        )
    else:
        cell = np.arange(mesh.n_tets)[:, None]
        bnd = np.zeros(0, dtype=int)
    return DofMap(kind, dof_count(kind, mesh), cell, np.sort(bnd))


def _dof_matrix_bdm(mesh: TetMesh) -> np.ndarray:
    """Local DOF functionals applied to lambda_i e_k; shape (T, 12 dofs, 4, 3)."""
    T = mesh.n_tets
    M = np.zeros((T, 4, 3, 4, 3))
    for f in range(4):
        F = mesh.tet_faces[:, f]
        n = mesh.face_normals[F]
        on_face = LOCAL_FACES[f]
        for j in range(3):
            loc = _local_index(mesh.tets, mesh.faces[F, j])
            for i in on_face:
                w = (1.0 + (loc == i)) / 12.0
                M[:, f, j, i, :] = w[:, None] * n
    return M.reshape(T, 12, 4, 3)


def _dof_matrix_ned(mesh: TetMesh) -> np.ndarray:
    T = mesh.n_tets
    M = np.zeros((T, 6, 2, 4, 3))
    for e, (i0, i1) in enumerate(LOCAL_EDGES):
        E = mesh.tet_edges[:, e]
        t = mesh.edge_tangents[E]
        for j in range(2):
            loc = _local_index(mesh.tets, mesh.edges[E, j])
            for i in (i0, i1):
                w = (1.0 + (loc == i)) / 6.0
                M[:, e, j, i, :] = w[:, None] * t
    return M.reshape(T, 12, 4, 3)


class FESpace:
    """Basis tables and DOF bookkeeping for one space on one mesh."""

    def __init__(self, mesh: TetMesh, kind: SpaceKind | str):
        self.mesh = mesh
        self.kind = SpaceKind(kind)
        self.family = self.kind.family
        self.dofmap = _dofmap(mesh, self.kind)
        self._glam = mesh.barycentric_gradients()
        if self.family in ("BDM1", "NED2"):
            M = _dof_matrix_bdm(mesh) if self.family == "BDM1" else _dof_matrix_ned(mesh)
            Mflat = M.reshape(mesh.n_tets, 12, 12)
            self.dof_matrix = Mflat
            C = np.linalg.inv(Mflat)  # columns: basis functions in the lambda_i e_k basis
            self.coef = C.reshape(mesh.n_tets, 4, 3, 12)  # [t, i, k, m]
            # d phi_m[k] / d x_l
            self.grad = np.einsum("tikm,til->tmkl", self.coef, self._glam)

    # -- bookkeeping -----------------------------------------------------------
    @property
    def ndofs(self) -> int:
        return self.dofmap.ndofs

    @property
    def nloc(self) -> int:
        return self.dofmap.nloc

    @property
    def cell_dofs(self) -> np.ndarray:
        return self.dofmap.cell_dofs

    @property
    def boundary_dofs(self) -> np.ndarray:
        return self.dofmap.boundary_dofs

    # -- basis evaluation ------------------------------------------------------
    def values(self, bary: np.ndarray, cells=None) -> np.ndarray:
        """Basis values at barycentric points.

        ``bary`` is either (Q, 4), shared by all cells, or (N, Q, 4) with one
        set of points per entry of ``cells``.  Returns (N, Q, nloc, 3) for
        vector spaces and (N, Q, nloc) for scalar ones.
        """
        cells = np.arange(self.mesh.n_tets) if cells is None else np.asarray(cells)
        lam = np.broadcast_to(bary, (len(cells),) + np.shape(bary)[-2:]) if np.ndim(bary) == 2 else bary
        if self.family in ("BDM1", "NED2"):
            return np.einsum("nqi,nikm->nqmk", lam, self.coef[cells])
        if self.family == "P2":
            ij = LOCAL_EDGES
            vert = lam * (2.0 * lam - 1.0)
            edge = 4.0 * lam[..., ij[:, 0]] * lam[..., ij[:, 1]]
            return np.concatenate([vert, edge], axis=-1)
        return np.ones(lam.shape[:-1] + (1,))

    def gradients(self, bary: np.ndarray | None = None, cells=None) -> np.ndarray:
        """Vector spaces: (N, nloc, 3, 3) constant Jacobians.  P2: (N, Q, nloc, 3)."""
        cells = np.arange(self.mesh.n_tets) if cells is None else np.asarray(cells)
        if self.family in ("BDM1", "NED2"):
            return self.grad[cells]
        if self.family == "P2":
            lam = np.broadcast_to(bary, (len(cells),) + np.shape(bary)[-2:]) if np.ndim(bary) == 2 else bary
            g = self._glam[cells]  # (N, 4, 3)
            vert = (4.0 * lam - 1.0)[..., None] * g[:, None, :, :]
            a, b = LOCAL_EDGES[:, 0], LOCAL_EDGES[:, 1]
            edge = 4.0 * (
                lam[..., b, None] * g[:, None, a, :] + lam[..., a, None] * g[:, None, b, :]
            )
            return np.concatenate([vert, edge], axis=2)
        lam = np.asarray(bary)
        return np.zeros((len(cells),) + lam.shape[-2:-1] + (1, 3))

    def curls(self, cells=None) -> np.ndarray:
        g = self.gradients(cells=cells)
        return np.stack(
            [g[..., 2, 1] - g[..., 1, 2], g[..., 0, 2] - g[..., 2, 0], g[..., 1, 0] - g[..., 0, 1]], axis=-1
        )

    def divergences(self, cells=None) -> np.ndarray:
        g = self.gradients(cells=cells)
        return np.trace(g, axis1=-2, axis2=-1)

    def eval_basis(self, cell: int, bary: np.ndarray) -> dict:
        """Values and derivative quantities of all local shape functions of ``cell``."""
        bary = np.atleast_2d(bary)
        out = {"values": self.values(bary, [cell])[0]}
        if self.family == "BDM1":
            out["gradients"] = self.grad[cell]
            out["divergence"] = self.divergences([cell])[0]
        elif self.family == "NED2":
            out["curl"] = self.curls([cell])[0]
        elif self.family == "P2":
            out["gradients"] = self.gradients(bary, [cell])[0]
        return out

    # -- fields ----------------------------------------------------------------
    def local_coefficients(self, coeffs: np.ndarray, cells=None) -> np.ndarray:
        cd = self.cell_dofs if cells is None else self.cell_dofs[cells]
        return np.asarray(coeffs)[cd]

    def evaluate(self, coeffs, bary, cells=None) -> np.ndarray:
        c = self.local_coefficients(coeffs, cells)
        vals = self.values(bary, cells)
        if self.kind.is_vector:
            return np.einsum("nqmk,nm->nqk", vals, c)
        return np.einsum("nqm,nm->nq", vals, c)

    def evaluate_gradient(self, coeffs, bary=None, cells=None) -> np.ndarray:
        c = self.local_coefficients(coeffs, cells)
        g = self.gradients(bary, cells)
        if self.kind.is_vector:
            return np.einsum("nmkl,nm->nkl", g, c)
        return np.einsum("nqml,nm->nql", g, c)

    def evaluate_curl(self, coeffs, cells=None) -> np.ndarray:
        return np.einsum("nmk,nm->nk", self.curls(cells), self.local_coefficients(coeffs, cells))

    def evaluate_div(self, coeffs, cells=None) -> np.ndarray:
        return np.einsum("nm,nm->n", self.divergences(cells), self.local_coefficients(coeffs, cells))

    def interpolate(self, f, degree: int = INTERPOLATION_DEGREE) -> np.ndarray:
        """Apply the DOF functionals to the callable ``f`` (points (N, 3) -> values)."""
        mesh = self.mesh
        X = mesh.vertices
        if self.family == "BDM1":
            rule = tri_rule(degree)
            pts = np.einsum("qj,fjk->fqk", rule.points, X[mesh.faces])
            vals = np.asarray(f(pts.reshape(-1, 3)), dtype=float).reshape(pts.shape)
            fn = np.einsum("fqk,fk->fq", vals, mesh.face_normals)
            dofs = np.einsum("fq,q,qj->fj", fn, rule.unit_weights, rule.points)
            return dofs.ravel()
        if self.family == "NED2":
            rule = line_rule(degree)
            pts = np.einsum("qj,ejk->eqk", rule.points, X[mesh.edges])
            vals = np.asarray(f(pts.reshape(-1, 3)), dtype=float).reshape(pts.shape)
            ft = np.einsum("eqk,ek->eq", vals, mesh.edge_tangents)
            dofs = np.einsum("eq,q,qj->ej", ft, rule.unit_weights, rule.points)
            return dofs.ravel()
        if self.family == "P2":
            mid = 0.5 * (X[mesh.edges[:, 0]] + X[mesh.edges[:, 1]])
            return np.concatenate([np.asarray(f(X), float), np.asarray(f(mid), float)])
        rule = tet_rule(degree)
        pts = mesh.map_points(rule.points)
        vals = np.asarray(f(pts.reshape(-1, 3)), dtype=float).reshape(pts.shape[:2])
        return vals @ rule.unit_weights


def make_spaces(mesh: TetMesh) -> dict[str, FESpace]:
    """All six spaces keyed by variable name (A, phi, H, r, u, p)."""
    return {
        "A": FESpace(mesh, SpaceKind.D),
        "phi": FESpace(mesh, SpaceKind.Y),
        "H": FESpace(mesh, SpaceKind.W),
        "r": FESpace(mesh, SpaceKind.S),
        "u": FESpace(mesh, SpaceKind.V),
        "p": FESpace(mesh, SpaceKind.Q),
    }


def discrete_gradient(mesh: TetMesh) -> sp.csr_matrix:
    """Exact map from P2 coefficients to Nedelec-2 coefficients of their gradient."""
    V, E = mesh.n_vertices, mesh.n_edges
    inv_len = 1.0 / mesh.edge_lengths
    # moments of d/ds of the three P2 functions living on an edge, against
    # (1 - s) and s; s runs from the lower to the higher vertex
    table = np.array([[-5 / 6, 1 / 6, 2 / 3], [-1 / 6, 5 / 6, -2 / 3]])
    rows, cols, vals = [], [], []
    e = np.arange(E)
    targets = [mesh.edges[:, 0], mesh.edges[:, 1], V + e]
    for j in range(2):
        for c in range(3):
            rows.append(2 * e + j)
            cols.append(targets[c])
            vals.append(table[j, c] * inv_len)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(2 * E, V + E)
    )


def face_points(mesh: TetMesh, rule, faces=None, face_bary=None, unit_weights=None):
    """Face quadrature data seen from both adjacent tets.

    Returns a dict with physical points (F, Q, 3), weights scaled by face
    area (F, Q), tet-barycentric coordinates for the K+ and K- sides
    (F, Q, 4) and the face normals.  K- data is meaningless for boundary
    faces (index -1) and carries zeros.  By default every face uses
    ``rule``; per-face points may be passed instead as face-barycentric
    coordinates ``face_bary`` (F, Q, 3) with weights ``unit_weights`` (F, Q)
    summing to one on each face.
    """
    faces = np.arange(mesh.n_faces) if faces is None else np.asarray(faces)
    nf = len(faces)
    if face_bary is None:
        face_bary = np.broadcast_to(rule.points, (nf,) + rule.points.shape)
        unit_weights = np.broadcast_to(rule.unit_weights, (nf, rule.points.shape[0]))
    nq = face_bary.shape[1]
    fv = mesh.faces[faces]
    X = mesh.vertices
    pts = np.einsum("fqj,fjk->fqk", face_bary, X[fv])
    w = mesh.face_areas[faces][:, None] * unit_weights
    out = {"points": pts, "weights": w, "normals": mesh.face_normals[faces], "faces": faces}
    for side, name in ((0, "plus"), (1, "minus")):
        K = mesh.face_tets[faces, side]
        valid = K >= 0
        Kc = np.where(valid, K, 0)
        bary = np.zeros((nf, nq, 4))
        tv = mesh.tets[Kc]
        for j in range(3):
            loc = _local_index(tv, fv[:, j])
            np.put_along_axis(
                bary,
                np.broadcast_to(loc[:, None, None], (nf, nq, 1)),
                face_bary[:, :, j : j + 1],
                axis=2,
            )
        bary[~valid] = 0.0
        out[f"cells_{name}"] = Kc
        out[f"valid_{name}"] = valid
        out[f"bary_{name}"] = bary
    return out


def sign_split_rule(s: np.ndarray, rule):
    """Quadrature on each face split along the zero line of a linear function.

    ``s`` (F, 3) holds the values of a function that is linear on each face
    at its three vertices.  Every face is cut into three sub-triangles (some
    possibly of zero area) on each of which ``s`` has one sign, and ``rule``
    is mapped onto each piece.  Returns face-barycentric points (F, 3Q, 3),
    unit weights (F, 3Q) and a boolean (F, 3Q) that is True where ``s > 0``
    on the piece.
    """
    s = np.asarray(s, dtype=float)
    nf = s.shape[0]
    pos = s > 0.0
    npos = pos.sum(axis=1)
    split = (npos == 1) | (npos == 2)
    # the vertex whose sign differs from the other two
    iso = np.where(npos == 1, np.argmax(pos, axis=1), np.argmin(pos, axis=1))
    iso = np.where(split, iso, 0)
    j = (iso + 1) % 3
    k = (iso + 2) % 3
    rows = np.arange(nf)
    si, sj, sk = s[rows, iso], s[rows, j], s[rows, k]
    eye = np.eye(3)
    ei, ej, ek = eye[iso], eye[j], eye[k]
    with np.errstate(divide="ignore", invalid="ignore"):
        tj = np.where(split, si / (si - sj), 0.0)
        tk = np.where(split, si / (si - sk), 0.0)
    cj = (1 - tj)[:, None] * ei + tj[:, None] * ej
    ck = (1 - tk)[:, None] * ei + tk[:, None] * ek
    # piece vertices (F, 3 pieces, 3 corners, 3 face-bary coords)
    pieces = np.stack(
        [np.stack([ei, cj, ck], 1), np.stack([cj, ej, ek], 1), np.stack([cj, ek, ck], 1)], 1
    )
    whole = np.stack([np.broadcast_to(eye, (nf, 3, 3)), np.zeros((nf, 3, 3)), np.zeros((nf, 3, 3))], 1)
    pieces = np.where(split[:, None, None, None], pieces, whole)
    # the 2D area ratio of a piece is |det| of its barycentric corner matrix
    frac = np.abs(np.linalg.det(pieces))
    pts = np.einsum("qc,fpcj->fpqj", rule.points, pieces)
    w = frac[:, :, None] * rule.unit_weights[None, None, :]
    sign_iso = pos[rows, iso]
    sign_rest = pos[rows, j]
    psign = np.stack([sign_iso, sign_rest, sign_rest], 1)
    psign = np.where(split[:, None], psign, pos[:, :1])
    nq = rule.points.shape[0]
    return (
        pts.reshape(nf, 3 * nq, 3),
        w.reshape(nf, 3 * nq),
        np.repeat(psign, nq, axis=1),
    )

"""Structured tetrahedral meshes of an axis-aligned box.

Each subcube is split into six tetrahedra along its (1, 1, 1) diagonal (Kuhn /
Freudenthal subdivision), which keeps the triangulation conforming and makes
uniform red refinement self-similar.

Orientation conventions
-----------------------
* edges and faces are stored with ascending global vertex indices and are
  numbered lexicographically by that tuple;
* the edge tangent points from the lower to the higher vertex index;
* an interior face normal is the right-hand normal of its sorted vertex
  triple, and ``face_tets[f] = (K+, K-)`` is chosen so the normal points from
  K+ into K-.  Boundary faces get the outward normal and ``K- = -1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

# local edge (i, j) numbering and local face numbering (face f is opposite vertex f)
LOCAL_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
LOCAL_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


@dataclass(frozen=True, eq=False)
class TetMesh:
    vertices: np.ndarray  # (V, 3)
    tets: np.ndarray  # (T, 4), positively oriented
    box: tuple = ((0.0, 1.0), (0.0, 1.0), (0.0, 1.0))
    divisions: int = 1
    # entity tables, filled in __post_init__
    edges: np.ndarray = field(init=False, repr=False)
    faces: np.ndarray = field(init=False, repr=False)
    tet_edges: np.ndarray = field(init=False, repr=False)
    tet_faces: np.ndarray = field(init=False, repr=False)
    face_tets: np.ndarray = field(init=False, repr=False)
    face_local: np.ndarray = field(init=False, repr=False)
    face_normals: np.ndarray = field(init=False, repr=False)
    face_areas: np.ndarray = field(init=False, repr=False)
    face_diameters: np.ndarray = field(init=False, repr=False)
    edge_tangents: np.ndarray = field(init=False, repr=False)
    edge_lengths: np.ndarray = field(init=False, repr=False)
    volumes: np.ndarray = field(init=False, repr=False)
    boundary_faces: np.ndarray = field(init=False, repr=False)
    boundary_edges: np.ndarray = field(init=False, repr=False)
    boundary_vertices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for name, value in _entity_tables(self.vertices, self.tets).items():
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        self.vertices.setflags(write=False)
        self.tets.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def h(self) -> float:
        """Largest tetrahedron diameter."""
        return float(self.tet_diameters.max())

    @property
    def tet_diameters(self) -> np.ndarray:
        x = self.vertices[self.tets]
        d = x[:, LOCAL_EDGES[:, 1]] - x[:, LOCAL_EDGES[:, 0]]
        return np.sqrt((d**2).sum(-1)).max(axis=1)

    @property
    def layer_width(self) -> float:
        """Thickness of one layer of subcubes along z."""
        (z0, z1) = self.box[2]
        return (z1 - z0) / self.divisions

    @property
    def interior_faces(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_faces)

    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_faces - self.n_tets

    def jacobians(self) -> np.ndarray:
        x = self.vertices[self.tets]
        return np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=-1)

    def barycentric_gradients(self) -> np.ndarray:
        """(T, 4, 3) gradients of the barycentric coordinates."""
        Jinv = np.linalg.inv(self.jacobians())  # rows are grad lambda_1..3
        g = np.empty((self.n_tets, 4, 3))
        g[:, 1:] = Jinv
        g[:, 0] = -Jinv.sum(axis=1)
        return g

    def map_points(self, bary: np.ndarray, cells=None) -> np.ndarray:
        """Physical coordinates of barycentric points; returns (T, Q, 3)."""
        tets = self.tets if cells is None else self.tets[cells]
        return np.einsum("qi,tik->tqk", bary, self.vertices[tets])

    def entity_tables(self):
        """Face list, edge list and adjacency (tet->edge, tet->face, face->tets).

        The adjacency also carries orientation signs: ``edge_signs[t, e]`` is +1
        when local edge ``e`` runs along the global tangent, ``face_signs[t, f]``
        is +1 when the outward normal of local face ``f`` equals ``n_F``.
        """
        tv = self.tets
        edge_signs = np.sign(tv[:, LOCAL_EDGES[:, 1]] - tv[:, LOCAL_EDGES[:, 0]]).astype(int)
        owner = self.face_tets[self.tet_faces, 0]
        face_signs = np.where(owner == np.arange(self.n_tets)[:, None], 1, -1)
        return self.faces, self.edges, {
            "tet_edges": self.tet_edges,
            "tet_faces": self.tet_faces,
            "face_tets": self.face_tets,
            "face_local": self.face_local,
            "edge_signs": edge_signs,
            "face_signs": face_signs,
        }


def _signed_volumes(vertices, tets):
    x = vertices[tets]
    J = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=-1)
    return np.linalg.det(J) / 6.0


def _orient(vertices, tets):
    tets = tets.copy()
    neg = _signed_volumes(vertices, tets) < 0
    tets[neg, 2], tets[neg, 3] = tets[neg, 3], tets[neg, 2].copy()
    return tets


def _entity_tables(vertices, tets):
    T = len(tets)
    vol = _signed_volumes(vertices, tets)
    if np.any(vol <= 0):
        raise ValueError("mesh contains degenerate or negatively oriented tetrahedra")

    all_edges = np.sort(tets[:, LOCAL_EDGES].reshape(-1, 2), axis=1)
    edges, tet_edges = np.unique(all_edges, axis=0, return_inverse=True)
    tet_edges = tet_edges.reshape(T, 6)

    all_faces = np.sort(tets[:, LOCAL_FACES].reshape(-1, 3), axis=1)
    faces, tet_faces = np.unique(all_faces, axis=0, return_inverse=True)
    tet_faces = tet_faces.reshape(T, 4)
    nF = len(faces)

    counts = np.bincount(tet_faces.ravel(), minlength=nF)
    if np.any(counts > 2):
        raise ValueError("non-manifold mesh: a face is shared by more than two tetrahedra")

    # first and second incident tet per face
    order = np.argsort(tet_faces.ravel(), kind="stable")
    owner = order // 4
    local = order % 4
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    t0, l0 = owner[start], local[start]
    second = np.where(counts == 2, start + 1, start)
    t1 = np.where(counts == 2, owner[second], -1)
    l1 = np.where(counts == 2, local[second], -1)

    x = vertices[faces]
    nrm = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
    area2 = np.linalg.norm(nrm, axis=1)
    normals = nrm / area2[:, None]

    # outward direction of face from t0: away from the opposite vertex
    opposite = vertices[tets[t0, l0]]
    outward0 = np.einsum("fk,fk->f", normals, x[:, 0] - opposite) > 0
    boundary = counts == 1
    # boundary: flip normal to point outward; interior: K+ is the tet it leaves
    flip = boundary & ~outward0
    normals[flip] *= -1.0
    swap = ~boundary & ~outward0
    kp = np.where(swap, t1, t0)
    lp = np.where(swap, l1, l0)
    km = np.where(swap, t0, t1)
    lm = np.where(swap, l0, l1)

    fd = x[:, [1, 2, 0]] - x
    face_diam = np.sqrt((fd**2).sum(-1)).max(axis=1)

    ev = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    elen = np.linalg.norm(ev, axis=1)

    bedges = np.zeros(len(edges), dtype=bool)
    bverts = np.zeros(len(vertices), dtype=bool)
    bf = faces[boundary]
    bverts[bf.ravel()] = True
    # an edge is on the boundary iff it belongs to a boundary face
    bf_edges = np.sort(np.concatenate([bf[:, [0, 1]], bf[:, [0, 2]], bf[:, [1, 2]]]), axis=1)
    key = edges[:, 0] * len(vertices) + edges[:, 1]
    bkey = bf_edges[:, 0] * len(vertices) + bf_edges[:, 1]
    bedges[np.isin(key, bkey)] = True

    return {
        "edges": edges,
        "faces": faces,
        "tet_edges": tet_edges,
        "tet_faces": tet_faces,
        "face_tets": np.column_stack([kp, km]),
        "face_local": np.column_stack([lp, lm]),
        "face_normals": normals,
        "face_areas": 0.5 * area2,
        "face_diameters": face_diam,
        "edge_tangents": ev / elen[:, None],
        "edge_lengths": elen,
        "volumes": vol,
        "boundary_faces": boundary,
        "boundary_edges": bedges,
        "boundary_vertices": bverts,
    }


def _check_box(box):
    box = tuple((float(a), float(b)) for a, b in box)
    if len(box) != 3 or any(b - a <= 0 for a, b in box):
        raise ValueError(f"degenerate box {box}")
    return box


def build_box_mesh(box=((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)), n: int = 1) -> TetMesh:
    """Kuhn mesh of ``box`` with ``n`` subcubes per axis (6 n^3 tets)."""
    if int(n) != n or n < 1:
        raise ValueError(f"need n >= 1 subdivisions, got {n}")
    n = int(n)
    box = _check_box(box)
    axes = [np.linspace(a, b, n + 1) for a, b in box]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def vid(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    I, J, K = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    unit = np.eye(3, dtype=int)
    tets = []
    for perm in permutations(range(3)):
        p = np.zeros(3, dtype=int)
        path = [vid(I, J, K)]
        for axis in perm:
            p = p + unit[axis]
            path.append(vid(I + p[0], J + p[1], K + p[2]))
        tets.append(np.column_stack(path))
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    return TetMesh(vertices, _orient(vertices, tets), box, n)


# children of a tet (x0, x1, x2, x3) in terms of vertices 0..3 and midpoints (i, j)
_BEY_CHILDREN = [
    (0, (0, 1), (0, 2), (0, 3)),
    ((0, 1), 1, (1, 2), (1, 3)),
    ((0, 2), (1, 2), 2, (2, 3)),
    ((0, 3), (1, 3), (2, 3), 3),
    ((0, 1), (0, 2), (0, 3), (1, 3)),
    ((0, 1), (0, 2), (1, 2), (1, 3)),
    ((0, 2), (0, 3), (1, 3), (2, 3)),
    ((0, 2), (1, 2), (1, 3), (2, 3)),
]


def refine_uniform(mesh: TetMesh) -> TetMesh:
    """Red refinement: 8 children per tet, new vertices at edge midpoints.

    Vertices of each parent are ordered by coordinate sum before splitting,
    which for Kuhn tetrahedra is the order along the monotone path and makes
    the children Kuhn tetrahedra of the halved grid.
    """
    V = mesh.n_vertices
    verts = mesh.vertices
    mid = 0.5 * (verts[mesh.edges[:, 0]] + verts[mesh.edges[:, 1]])
    new_vertices = np.vstack([verts, mid])

    # sort by coordinate sum; stable sort on index-ordered rows breaks ties by index
    byindex = np.sort(mesh.tets, axis=1)
    perm = np.argsort(verts[byindex].sum(-1), axis=1, kind="stable")
    tv = np.take_along_axis(byindex, perm, axis=1)

    edge_index = {}
    ekeys = mesh.edges[:, 0].astype(np.int64) * V + mesh.edges[:, 1]
    lookup = np.argsort(ekeys)
    sorted_keys = ekeys[lookup]

    def midpoint(i, j):
        a = np.minimum(tv[:, i], tv[:, j]).astype(np.int64)
        b = np.maximum(tv[:, i], tv[:, j])
        pos = np.searchsorted(sorted_keys, a * V + b)
        return V + lookup[pos]

    for i, j in LOCAL_EDGES:
        edge_index[(i, j)] = midpoint(i, j)

    def node(spec):
        return tv[:, spec] if isinstance(spec, int) else edge_index[spec]

    children = np.stack(
        [np.column_stack([node(s) for s in child]) for child in _BEY_CHILDREN], axis=1
    ).reshape(-1, 4)
    return TetMesh(new_vertices, _orient(new_vertices, children), mesh.box, 2 * mesh.divisions)


def mesh_level(level: int, box=((0.0, 1.0), (0.0, 1.0), (0.0, 1.0))) -> TetMesh:
    """Mesh T_level of the refinement hierarchy (T_1 is the 6-tet cube)."""
    if level < 1:
        raise ValueError("mesh levels start at 1")
    mesh = build_box_mesh(box, 1)
    for _ in range(level - 1):
        mesh = refine_uniform(mesh)
    return mesh

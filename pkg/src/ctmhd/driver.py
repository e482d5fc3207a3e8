"""Picard iteration, benchmark problems, error norms and diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import time
from typing import Callable, Optional, Union

import numpy as np

from .assembly import (
    VARIABLES,
    Params,
    ProblemData,
    assemble_static,
    build_system,
    essential_values,
)
from .fespace import FESpace, face_points, make_spaces
from .io import save_arrays, write_vtk
from .krylov import SolveConfig, SolveReport, direct_solve, fgmres
from .mesh import TetMesh
from .precond import build_preconditioner
from .quadrature import tet_rule, tri_rule

log = logging.getLogger(__name__)

ERROR_DEGREE = 6

Field = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------
@dataclass
class State:
    """Coefficient vectors of the six unknowns."""

    A: np.ndarray
    phi: np.ndarray
    H: np.ndarray
    r: np.ndarray
    u: np.ndarray
    p: np.ndarray

    @classmethod
    def zeros(cls, spaces: dict) -> "State":
        return cls(**{v: np.zeros(spaces[v].ndofs) for v in VARIABLES})

    @classmethod
    def from_dict(cls, d: dict) -> "State":
        return cls(**{v: np.asarray(d[v], dtype=float) for v in VARIABLES})

    def as_dict(self) -> dict:
        return {v: getattr(self, v) for v in VARIABLES}

    def vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, v) for v in VARIABLES])

    def copy(self) -> "State":
        return State(**{v: getattr(self, v).copy() for v in VARIABLES})


def scalar_integrals(space: FESpace) -> np.ndarray:
    """Integral of each basis function of a scalar space."""
    rule = tet_rule(2)
    loc = np.einsum("t,q,tqm->tm", space.mesh.volumes, rule.unit_weights, space.values(rule.points))
    return np.bincount(space.cell_dofs.ravel(), loc.ravel(), minlength=space.ndofs)


def mean_shift(space: FESpace, coeffs: np.ndarray) -> np.ndarray:
    """Subtract the mean value over the domain (constants lie in both scalar spaces)."""
    w = scalar_integrals(space)
    return coeffs - (w @ coeffs) / w.sum()


# ---------------------------------------------------------------------------
# Picard iteration
# ---------------------------------------------------------------------------
@dataclass
class PicardConfig:
    """Nonlinear iteration settings.

    ``linear`` chooses the preconditioned ``"fgmres"`` path or a monolithic
    ``"direct"`` sparse solve of every linearized system.  Each FGMRES solve
    starts from zero by default.  With ``warm_start`` it starts from the
    previous Picard iterate instead, so the relative stopping test tightens
    as the iteration settles.
    """

    delta: float = 1e-5
    maxiter: int = 100
    solve: SolveConfig = field(default_factory=SolveConfig)
    linear: str = "fgmres"
    variant: str = "S_u"
    initial: Optional[State] = None
    warm_start: bool = False

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.linear not in ("fgmres", "direct"):
            raise ValueError(f"unknown linear solver {self.linear!r}")


@dataclass
class PicardReport:
    thetas: list = field(default_factory=list)  # (theta_u, theta_H, theta_A) per step
    gmres_iterations: list = field(default_factory=list)
    linear_converged: list = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.thetas)

    @property
    def mean_gmres(self) -> float:
        return float(np.mean(self.gmres_iterations)) if self.gmres_iterations else 0.0

    @property
    def linear_ok(self) -> bool:
        return all(self.linear_converged)


def stopping_theta(current: State, previous: State, masses: dict) -> tuple[float, float, float]:
    """Relative L2 updates of u, H and A measured with the mass matrices."""

    def theta(key):
        M = masses[key]
        new = getattr(current, key)
        d = new - getattr(previous, key)
        dn = np.sqrt(max(d @ (M @ d), 0.0))
        nn = np.sqrt(max(new @ (M @ new), 0.0))
        if nn == 0.0:
            return 0.0 if dn == 0.0 else float("inf")
        return float(dn / nn)

    return theta("u"), theta("H"), theta("A")


def residual_weights(system) -> np.ndarray:
    """Diagonal of the FGMRES residual norm on the free DOFs.

    Pressure rows are scaled by ``|K|^{-1/2}``, so their part of the norm is
    the L2 norm of the cellwise divergence residual and does not shrink with
    the cell volume.  All other rows have weight one.
    """
    off = system.offsets(True)
    w = np.ones(off[-1])
    k = VARIABLES.index("p")
    w[off[k]:off[k + 1]] = 1.0 / np.sqrt(system.spaces["p"].mesh.volumes[system.free_dofs("p")])
    return w


def _pins(system) -> list:
    off = system.offsets(True)
    pins = [int(off[5])] if off[6] > off[5] else []
    if system.phi_neumann and off[2] > off[1]:
        pins.append(int(off[1]))
    return pins


def picard_solve(
    mesh: TetMesh,
    params: Params,
    data: Union[ProblemData, "ManufacturedCase"],
    config: Optional[PicardConfig] = None,
    spaces: Optional[dict] = None,
) -> tuple[State, PicardReport]:
    """Solve the stationary MHD system by Picard iteration from the zero state."""
    config = config or PicardConfig()
    if isinstance(data, ManufacturedCase):
        data = data.problem_data()
    t0 = time.perf_counter()
    spaces = spaces or make_spaces(mesh)
    static = assemble_static(spaces, params, data)
    ess = essential_values(spaces, data)
    masses = {"u": static.M_u, "H": static.M_H, "A": static.M_A}
    state = config.initial.copy() if config.initial is not None else State.zeros(spaces)
    report = PicardReport()
    weights = None
    for it in range(config.maxiter):
        system = build_system(spaces, params, data, state.u, state.A, static, ess)
        A = system.matrix()
        b = system.vector()
        if config.linear == "direct":
            x = direct_solve(A, b, pin=_pins(system))
            lin = SolveReport(iterations=0, converged=True)
        else:
            P = build_preconditioner(system, static, state.A, config.solve, variant=config.variant)
            x0 = system.restrict(state.as_dict()) if config.warm_start else None
            if weights is None:
                weights = residual_weights(system)
            x, lin = fgmres(A, b, P, config.solve, x0=x0, weights=weights)
        new = State.from_dict(system.split(x))
        new.p = mean_shift(spaces["p"], new.p)
        if data.phi_neumann:
            new.phi = mean_shift(spaces["phi"], new.phi)
        th = stopping_theta(new, state, masses)
        report.thetas.append(th)
        report.gmres_iterations.append(lin.iterations)
        report.linear_converged.append(lin.converged)
        log.info("picard %d: theta=%s gmres=%d", it + 1, th, lin.iterations)
        state = new
        if sum(th) < config.delta:
            report.converged = True
            break
    report.wall_time = time.perf_counter() - t0
    return state, report


# ---------------------------------------------------------------------------
# benchmark problems
# ---------------------------------------------------------------------------
def _vec(*cols):
    return np.column_stack(cols)


@dataclass
class ManufacturedCase:
    """Closed-form solution with matching sources.

    Each field is a callable on (N, 3) points; ``grad_u`` returns (N, 3, 3)
    with ``[n, k, l] = d u_k / d x_l``.
    """

    u: Field
    grad_u: Callable
    p: Field
    H: Field
    curl_H: Field
    A: Field
    curl_A: Field
    f: Field
    g_H: Field
    g_A: Field
    params: Params = field(default_factory=Params)
    name: str = "manufactured"

    def problem_data(self) -> ProblemData:
        return ProblemData(f=self.f, g_H=self.g_H, g_A=self.g_A, u_bc=self.u, H_bc=self.H,
                           A_bc=self.A, name=self.name)


def manufactured_case_example1() -> ManufacturedCase:
    """Smooth solution on the unit cube with Re = Rm = kappa = 1.

    ``A = (sin z, 0, 0)``, ``H = (0, cos z, 0)``, ``u = (cos z, sin(x+z), 0)``,
    ``p = x + y - 1`` and ``phi = r = 0``.
    """
    sin, cos = np.sin, np.cos

    def zero(x):
        return np.zeros(len(x))

    def u(x):
        return _vec(cos(x[:, 2]), sin(x[:, 0] + x[:, 2]), zero(x))

    def grad_u(x):
        g = np.zeros((len(x), 3, 3))
        g[:, 0, 2] = -sin(x[:, 2])
        c = cos(x[:, 0] + x[:, 2])
        g[:, 1, 0] = c
        g[:, 1, 2] = c
        return g

    def f(x):
        z, s = x[:, 2], x[:, 0] + x[:, 2]
        return _vec(1.0 + cos(z), 1.0 + cos(z) * cos(s) + 2.0 * sin(s), -sin(z) * cos(z))

    return ManufacturedCase(
        u=u,
        grad_u=grad_u,
        p=lambda x: x[:, 0] + x[:, 1] - 1.0,
        H=lambda x: _vec(zero(x), cos(x[:, 2]), zero(x)),
        curl_H=lambda x: _vec(sin(x[:, 2]), zero(x), zero(x)),
        A=lambda x: _vec(sin(x[:, 2]), zero(x), zero(x)),
        curl_A=lambda x: _vec(zero(x), cos(x[:, 2]), zero(x)),
        f=f,
        g_H=lambda x: _vec(zero(x), cos(x[:, 2]), zero(x)),
        g_A=lambda x: np.zeros((len(x), 3)),
        params=Params(Re=1.0, Rm=1.0, kappa=1.0),
        name="example1",
    )


def lid_profile(z: np.ndarray, width: float) -> np.ndarray:
    """Continuous lid velocity: 1 at z = 1, 0 below 1 - width, linear between."""
    return np.clip((z - (1.0 - width)) / width, 0.0, 1.0)


def cavity_benchmark(mesh: TetMesh, params: Optional[Params] = None) -> ProblemData:
    """Driven cavity: f = 0, A = (0, 0, -y), H = (-1, 0, 0), u = (v(z), 0, 0) on the boundary.

    The ramp of ``v`` spans the top layer of subcubes, ``mesh.layer_width``.
    """
    width = mesh.layer_width

    def u_bc(x):
        out = np.zeros((len(x), 3))
        out[:, 0] = lid_profile(x[:, 2], width)
        return out

    return ProblemData(
        f=None,
        u_bc=u_bc,
        H_bc=lambda x: np.column_stack([-np.ones(len(x)), np.zeros(len(x)), np.zeros(len(x))]),
        A_bc=lambda x: np.column_stack([np.zeros(len(x)), np.zeros(len(x)), -x[:, 1]]),
        name="cavity",
    )


# ---------------------------------------------------------------------------
# errors and diagnostics
# ---------------------------------------------------------------------------
def _volume_quadrature(mesh: TetMesh, degree: int = ERROR_DEGREE):
    rule = tet_rule(degree)
    pts = mesh.map_points(rule.points)
    w = mesh.volumes[:, None] * rule.unit_weights[None, :]
    return rule, pts, w


def _eval(fn, pts):
    flat = pts.reshape(-1, 3)
    val = np.asarray(fn(flat), dtype=float)
    return val.reshape(pts.shape[:2] + val.shape[1:])


def l2_error(space: FESpace, coeffs, exact: Optional[Field], degree: int = ERROR_DEGREE) -> float:
    rule, pts, w = _volume_quadrature(space.mesh, degree)
    vh = space.evaluate(coeffs, rule.points)
    ex = _eval(exact, pts) if exact is not None else np.zeros_like(vh)
    d = (vh - ex).reshape(w.shape + (-1,))
    return float(np.sqrt(np.einsum("tq,tqk->", w, d**2)))


def curl_error(space: FESpace, coeffs, exact_curl: Optional[Field], degree: int = ERROR_DEGREE) -> float:
    _, pts, w = _volume_quadrature(space.mesh, degree)
    ch = space.evaluate_curl(coeffs)[:, None, :]
    ex = _eval(exact_curl, pts) if exact_curl is not None else 0.0
    return float(np.sqrt(np.einsum("tq,tqk->", w, (ch - ex) ** 2)))


def dg_error(Vh: FESpace, coeffs, exact: Optional[Field], grad_exact: Optional[Callable],
             degree: int = ERROR_DEGREE) -> float:
    """Broken H1 seminorm plus ``h_F^-1``-weighted face jumps of ``u - u_h``.

    The exact field is continuous, so interior jumps are those of ``u_h`` and
    boundary jumps are the trace of the error.
    """
    mesh = Vh.mesh
    _, pts, w = _volume_quadrature(mesh, degree)
    gh = Vh.evaluate_gradient(coeffs)[:, None, :, :]
    gex = _eval(grad_exact, pts) if grad_exact is not None else 0.0
    vol = np.einsum("tq,tqkl->", w, (gh - gex) ** 2)

    fd = face_points(mesh, tri_rule(degree))
    up = Vh.evaluate(coeffs, fd["bary_plus"], fd["cells_plus"])
    um = Vh.evaluate(coeffs, fd["bary_minus"], fd["cells_minus"])
    interior = fd["valid_minus"]
    ex = _eval(exact, fd["points"]) if exact is not None else np.zeros_like(up)
    jump = np.where(interior[:, None, None], up - um, up - ex)
    face = np.einsum("f,fq,fqk->", 1.0 / mesh.face_diameters, fd["weights"], jump**2)
    return float(np.sqrt(vol + face))


def error_norms(state: State, case: ManufacturedCase, mesh: TetMesh, spaces: Optional[dict] = None) -> dict:
    """Errors against a manufactured solution in the energy-type norms.

    The pressure error uses mean-free representatives of both fields.
    """
    spaces = spaces or make_spaces(mesh)
    Vh, Qh, Wh, Dh = spaces["u"], spaces["p"], spaces["H"], spaces["A"]
    rule, pts, w = _volume_quadrature(mesh)
    p_ex = _eval(case.p, pts)
    p_ex = p_ex - np.einsum("tq,tq->", w, p_ex) / mesh.volumes.sum()
    ph = mean_shift(Qh, state.p)[:, None]
    p_err = float(np.sqrt(np.einsum("tq,tq->", w, (ph - p_ex) ** 2)))
    A_l2 = l2_error(Dh, state.A, case.A)
    H_l2 = l2_error(Wh, state.H, case.H)
    A_c = curl_error(Dh, state.A, case.curl_A)
    H_c = curl_error(Wh, state.H, case.curl_H)
    divu = Vh.evaluate_div(state.u)
    return {
        "u_dg": dg_error(Vh, state.u, case.u, case.grad_u),
        "u_L2": l2_error(Vh, state.u, case.u),
        "p_L2": p_err,
        "A_Hcurl": float(np.hypot(A_l2, A_c)),
        "H_Hcurl": float(np.hypot(H_l2, H_c)),
        "A_L2": A_l2,
        "H_L2": H_l2,
        "div_u_L2": float(np.sqrt(mesh.volumes @ divu**2)),
    }


def curl_flux_jumps(mesh: TetMesh, curl: np.ndarray) -> float:
    """Largest jump of ``curl . n_F`` across interior faces for a piecewise-constant curl."""
    fi = mesh.interior_faces
    n = mesh.face_normals[fi]
    kp, km = mesh.face_tets[fi, 0], mesh.face_tets[fi, 1]
    return float(np.abs(np.einsum("fk,fk->f", curl[kp] - curl[km], n)).max(initial=0.0))


def cellwise_divergence(mesh: TetMesh, curl: np.ndarray) -> np.ndarray:
    """Per-tet divergence via the divergence theorem: sum of outward fluxes / volume."""
    flux = np.zeros(mesh.n_tets)
    for f in range(4):
        F = mesh.tet_faces[:, f]
        sign = np.where(mesh.face_tets[F, 0] == np.arange(mesh.n_tets), 1.0, -1.0)
        flux += sign * mesh.face_areas[F] * np.einsum("tk,tk->t", curl, mesh.face_normals[F])
    return flux / mesh.volumes


def divergence_diagnostics(state: State, mesh: TetMesh, spaces: Optional[dict] = None,
                           static=None) -> dict:
    """Divergence and discrete Helmholtz residuals of a state.

    ``helmholtz_H`` is ``max_i |(H_h, grad s_i)| / (||H_h|| ||grad s_i||)`` over
    interior ``S_h`` basis functions, ``helmholtz_A`` the same for ``A_h``
    against ``Y_h``.
    """
    from .assembly import assemble_grad, assemble_mass, assemble_scalar_stiffness

    spaces = spaces or make_spaces(mesh)
    Vh, Wh, Dh, Sh, Yh = spaces["u"], spaces["H"], spaces["A"], spaces["r"], spaces["phi"]
    divu = Vh.evaluate_div(state.u)
    J = Wh.evaluate_curl(state.H)
    B = Dh.evaluate_curl(state.A)

    def helmholtz(vec_space, scal_space, coeffs):
        G = assemble_grad(vec_space, scal_space)
        M = assemble_mass(vec_space)
        L = assemble_scalar_stiffness(scal_space)
        free = np.setdiff1d(np.arange(scal_space.ndofs), scal_space.boundary_dofs)
        norm = np.sqrt(max(coeffs @ (M @ coeffs), 0.0))
        if norm == 0.0 or len(free) == 0:
            return 0.0
        res = (G @ coeffs)[free]
        return float(np.max(np.abs(res) / (norm * np.sqrt(L.diagonal()[free]))))

    return {
        "div_u_L2": float(np.sqrt(mesh.volumes @ divu**2)),
        "div_u_max": float(np.abs(divu).max()),
        "J_flux_jump": curl_flux_jumps(mesh, J),
        "B_flux_jump": curl_flux_jumps(mesh, B),
        "div_J_max": float(np.abs(cellwise_divergence(mesh, J)).max()),
        "div_B_max": float(np.abs(cellwise_divergence(mesh, B)).max()),
        "helmholtz_H": helmholtz(Wh, Sh, state.H),
        "helmholtz_A": helmholtz(Dh, Yh, state.A),
    }


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------
def cell_fields(state: State, spaces: dict) -> dict:
    """Centroid values of u, H and the piecewise constants p, B = curl A, J = curl H."""
    c = np.full((1, 4), 0.25)
    return {
        "u_h": spaces["u"].evaluate(state.u, c)[:, 0, :],
        "p_h": state.p,
        "H_h": spaces["H"].evaluate(state.H, c)[:, 0, :],
        "B_h": spaces["A"].evaluate_curl(state.A),
        "J_h": spaces["H"].evaluate_curl(state.H),
    }


def write_snapshot(path, state: State, mesh: TetMesh, spaces: dict, params: Params, meta: Optional[dict] = None):
    """VTK file with cell fields plus raw coefficients with a JSON header."""
    vtk = write_vtk(f"{path}.vtk", mesh, cell_data=cell_fields(state, spaces))
    header = {
        "spaces": {v: spaces[v].kind.value for v in VARIABLES},
        "families": {v: spaces[v].family for v in VARIABLES},
        "mesh": {"divisions": mesh.divisions, "n_tets": mesh.n_tets, "h": mesh.h},
        "params": params.__dict__,
    }
    header.update(meta or {})
    return (vtk,) + save_arrays(path, state.as_dict(), header)

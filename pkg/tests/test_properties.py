"""Structural property suite: conformity, upwind positivity, coercivity,
discrete Helmholtz orthogonality and the Picard stopping metric."""

from functools import lru_cache

from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
import numpy as np
import pytest
import scipy.linalg as la

from ctmhd.assembly import Params, assemble_Ah, assemble_dg_gram, assemble_mass, assemble_Oh
from ctmhd.driver import (
    PicardConfig,
    State,
    cavity_benchmark,
    cellwise_divergence,
    divergence_diagnostics,
    manufactured_case_example1,
    picard_solve,
    stopping_theta,
)
from ctmhd.fespace import face_points, make_spaces
from ctmhd.krylov import SolveConfig
from ctmhd.mesh import mesh_level
from test_assembly import solenoidal

PROPS = settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
LEVELS = (1, 2, 3)


@lru_cache(maxsize=None)
def _spaces(level):
    return make_spaces(mesh_level(level))


def _unit(n, i):
    e = np.zeros(n)
    e[i] = 1.0
    return e


def _traces(space, coef, face, bary):
    fd = face_points(space.mesh, None, np.array([face]), bary[None], np.full((1, len(bary)), 1.0 / len(bary)))
    vp = space.evaluate(coef, fd["bary_plus"], fd["cells_plus"])[0]
    vm = space.evaluate(coef, fd["bary_minus"], fd["cells_minus"])[0]
    return vp, vm, fd["normals"][0]


face_bary = st.lists(st.tuples(*[st.floats(0.01, 1.0)] * 3), min_size=3, max_size=3).map(
    lambda rows: np.array(rows) / np.array(rows).sum(axis=1, keepdims=True))


# -- conformity ------------------------------------------------------------------------
@PROPS
@given(level=st.sampled_from((1, 2)), pick=st.integers(0, 10**6), dof=st.integers(0, 10**6), bary=face_bary)
def test_hdiv_normal_trace_continuous(level, pick, dof, bary):
    V = _spaces(level)["u"]
    faces = V.mesh.interior_faces
    vp, vm, n = _traces(V, _unit(V.ndofs, dof % V.ndofs), faces[pick % len(faces)], bary)
    assert np.abs((vp - vm) @ n).max() <= 1e-12


@PROPS
@given(level=st.sampled_from((1, 2)), name=st.sampled_from(("A", "H")), pick=st.integers(0, 10**6),
       dof=st.integers(0, 10**6), bary=face_bary)
def test_hcurl_tangential_trace_continuous(level, name, pick, dof, bary):
    W = _spaces(level)[name]
    faces = W.mesh.interior_faces
    vp, vm, n = _traces(W, _unit(W.ndofs, dof % W.ndofs), faces[pick % len(faces)], bary)
    assert np.abs(np.cross(vp - vm, n)).max() <= 1e-12


@PROPS
@given(level=st.sampled_from((1, 2)), name=st.sampled_from(("A", "H")), seed=st.integers(0, 2**32 - 1))
def test_div_curl_vanishes(level, name, seed):
    W = _spaces(level)[name]
    c = np.random.default_rng(seed).standard_normal(W.ndofs)
    curl = W.evaluate_curl(c)
    assert np.abs(cellwise_divergence(W.mesh, curl)).max() <= 1e-13 * max(1.0, np.abs(curl).max()) / W.mesh.h


# -- upwind positivity -------------------------------------------------------------------
def test_Oh_positivity_identity_twenty_pairs(spaces1, oracle1):
    rng = np.random.default_rng(2024)
    for _ in range(20):
        w = solenoidal(spaces1["A"], spaces1["u"], rng.standard_normal(spaces1["A"].ndofs))
        v = rng.standard_normal(spaces1["u"].ndofs)
        energy = oracle1.jump_energy(w, v)
        assert energy >= 0.0
        assert v @ assemble_Oh(spaces1["u"], w) @ v == pytest.approx(energy, rel=1e-11, abs=1e-14)


@PROPS
@given(seed=st.integers(0, 2**32 - 1))
def test_Oh_nonnegative_for_solenoidal_wind(seed):
    S = _spaces(2)
    rng = np.random.default_rng(seed)
    w = solenoidal(S["A"], S["u"], rng.standard_normal(S["A"].ndofs))
    v = rng.standard_normal(S["u"].ndofs)
    O = assemble_Oh(S["u"], w)
    assert v @ O @ v >= -1e-12 * abs(v) @ abs(O) @ abs(v)


# -- A_h symmetry and coercivity ----------------------------------------------------------
@lru_cache(maxsize=None)
def _coercivity(level):
    V = _spaces(level)["u"]
    A = assemble_Ah(V, 1.0, 10.0).toarray()
    G = assemble_dg_gram(V).toarray()
    return np.abs(A - A.T).max() / np.abs(A).max(), la.eigh(A, G, eigvals_only=True, subset_by_index=[0, 0])[0]


@pytest.mark.parametrize("level", LEVELS)
def test_Ah_symmetric_and_coercive(level):
    asym, theta = _coercivity(level)
    assert asym <= 1e-14
    assert theta > 0


def test_Ah_coercivity_constant_mesh_stable():
    thetas = [_coercivity(L)[1] for L in LEVELS]
    assert max(thetas) / min(thetas) <= 2.0, thetas


# -- discrete Helmholtz orthogonality -------------------------------------------------------
EXAMPLE1 = dict(delta=1e-5, eps=1e-6)
CAVITY = dict(delta=1e-4, eps=1e-5)


@lru_cache(maxsize=None)
def _converged(case, level):
    mesh, S = mesh_level(level), _spaces(level)
    tol = EXAMPLE1 if case == "example1" else CAVITY
    if case == "example1":
        c = manufactured_case_example1()
        prm, data = c.params, c
    else:
        prm = Params(Re=1.0, Rm=10.0, kappa=1.0)
        data = cavity_benchmark(mesh, prm)
    cfg = PicardConfig(delta=tol["delta"], solve=SolveConfig(tol=tol["eps"]))
    state, rep = picard_solve(mesh, prm, data, cfg, S)
    return state, rep, divergence_diagnostics(state, mesh, S), tol["eps"]


@pytest.mark.parametrize("case,level", [("example1", 1), ("example1", 2), ("example1", 3),
                                        ("cavity", 1), ("cavity", 2)])
def test_helmholtz_orthogonality(case, level):
    _, rep, diag, eps = _converged(case, level)
    assert rep.converged
    assert diag["helmholtz_H"] <= 10 * eps, diag["helmholtz_H"]
    assert diag["helmholtz_A"] <= 10 * eps, diag["helmholtz_A"]


# -- Picard stopping metric -------------------------------------------------------------------
@lru_cache(maxsize=None)
def _masses(level):
    S = _spaces(level)
    return {k: assemble_mass(S[k]) for k in ("u", "H", "A")}


def _state(S, rng):
    return State(**{v: rng.standard_normal(S[v].ndofs) for v in S})


@PROPS
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-6, 1e6))
def test_theta_scale_invariant_and_unit_from_zero(seed, scale):
    S = _spaces(1)
    rng = np.random.default_rng(seed)
    a, b = _state(S, rng), _state(S, rng)
    th = stopping_theta(a, b, _masses(1))
    scaled = stopping_theta(State(**{v: scale * x for v, x in a.as_dict().items()}),
                            State(**{v: scale * x for v, x in b.as_dict().items()}), _masses(1))
    assert np.allclose(th, scaled, rtol=1e-10)
    assert np.allclose(stopping_theta(a, State.zeros(S), _masses(1)), 1.0, rtol=1e-13)
    assert stopping_theta(a, a, _masses(1)) == (0.0, 0.0, 0.0)


@PROPS
@given(seed=st.integers(0, 2**32 - 1))
def test_theta_matches_quadrature_norms(seed, oracle1):
    S = _spaces(1)
    rng = np.random.default_rng(seed)
    a, b = _state(S, rng), _state(S, rng)
    th = stopping_theta(a, b, _masses(1))
    for k, (key, fam) in enumerate((("u", "BDM1"), ("H", "NED2"), ("A", "NED2"))):
        new, old = getattr(a, key), getattr(b, key)
        assert th[k] == pytest.approx(oracle1.l2_norm(fam, new - old) / oracle1.l2_norm(fam, new), rel=1e-12)

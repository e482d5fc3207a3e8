import numpy as np
import pytest
import scipy.io
import scipy.linalg as la
import scipy.sparse as sp

from ctmhd.assembly import (
    VARIABLES,
    Params,
    ProblemData,
    assemble_Ah,
    assemble_B,
    assemble_coupling_mass,
    assemble_curlcurl,
    assemble_dg_gram,
    assemble_F,
    assemble_grad,
    assemble_graddiv,
    assemble_L,
    assemble_mass,
    assemble_mixed_K,
    assemble_Oh,
    assemble_rhs,
    assemble_scalar_stiffness,
    assemble_static,
    assemble_Su,
    boundary_velocity_rhs,
    build_system,
    curl_field,
    essential_values,
    export_matrix_market,
    load_vector,
)
from ctmhd.driver import cavity_benchmark, manufactured_case_example1
from ctmhd.fespace import discrete_gradient, make_spaces
from ctmhd.mesh import mesh_level

TOL = 1e-12


def dense(M):
    return M.toarray() if sp.issparse(M) else np.asarray(M)


def rel_diff(X, Y):
    X, Y = dense(X), dense(Y)
    assert X.shape == Y.shape
    return np.abs(X - Y).max() / max(np.abs(Y).max(), 1e-300)


def col(*c):
    return np.column_stack(c)


def const(v):
    return lambda x: np.tile(np.asarray(v, float), (len(x), 1))


def solenoidal(space_A, space_u, a):
    """BDM1 coefficients of curl of the edge field ``a`` (exactly divergence-free)."""
    m = space_u.mesh
    c = space_A.evaluate_curl(a)
    flux = np.einsum("fk,fk->f", c[m.face_tets[:, 0]], m.face_normals)
    return np.repeat(flux / 3.0, 3)


# -- oracle equivalence on T1 -----------------------------------------------------
class TestOracleEquivalence:
    @pytest.fixture(autouse=True)
    def _setup(self, spaces1, oracle1, rng):
        self.S, self.o = spaces1, oracle1
        self.A_prev = rng.standard_normal(spaces1["A"].ndofs)
        self.w = rng.standard_normal(spaces1["u"].ndofs)

    @pytest.mark.parametrize("var,family", [("A", "NED2"), ("u", "BDM1"), ("phi", "P2"), ("p", "P0")])
    def test_mass(self, var, family):
        assert rel_diff(assemble_mass(self.S[var], 1.5), self.o.mass(family, 1.5)) < TOL

    def test_curlcurl(self):
        assert rel_diff(assemble_curlcurl(self.S["H"], 2.0), self.o.curlcurl(2.0)) < TOL

    def test_stiffness(self):
        assert rel_diff(assemble_scalar_stiffness(self.S["r"], 3.0), self.o.stiffness(3.0)) < TOL

    def test_grad(self):
        assert rel_diff(assemble_grad(self.S["A"], self.S["phi"]), self.o.grad_pairing()) < TOL

    def test_mixed_K(self):
        assert rel_diff(assemble_mixed_K(self.S["H"], self.S["A"]), self.o.mixed_K()) < TOL

    def test_divergence(self):
        assert rel_diff(assemble_B(self.S["u"], self.S["p"]), self.o.divergence()) < TOL

    def test_graddiv(self):
        assert rel_diff(assemble_graddiv(self.S["u"], 3.0), self.o.graddiv(3.0)) < TOL

    def test_lorentz(self):
        c = curl_field(self.S["A"], self.A_prev)
        assert np.abs(c - self.o.curl_of(self.A_prev)).max() < TOL
        assert rel_diff(assemble_L(self.S["u"], self.S["H"], c, 2.0), self.o.lorentz(self.A_prev, 2.0)) < TOL

    def test_coupling_mass(self):
        c = curl_field(self.S["A"], self.A_prev)
        assert rel_diff(assemble_coupling_mass(self.S["u"], c, 2.0), self.o.coupling_mass(self.A_prev, 2.0)) < TOL

    def test_interior_penalty(self):
        assert rel_diff(assemble_Ah(self.S["u"], 3.0, 10.0), self.o.interior_penalty(3.0, 10.0)) < TOL

    def test_convection_random_velocity(self):
        assert rel_diff(assemble_Oh(self.S["u"], self.w), self.o.convection(self.w)) < TOL

    def test_convection_smooth_velocity(self):
        w = self.S["u"].interpolate(lambda x: col(1 + 0.2 * x[:, 0], 2 - 0.1 * x[:, 2], 3 + 0.3 * x[:, 1]))
        assert rel_diff(assemble_Oh(self.S["u"], w), self.o.convection(w)) < TOL

    def test_loads(self):
        def f(x):
            return col(x[:, 0] ** 2, x[:, 1] * x[:, 2], 1 + x[:, 0])

        assert rel_diff(load_vector(self.S["A"], f), self.o.load("NED2", f)) < TOL
        assert rel_diff(load_vector(self.S["u"], f), self.o.load("BDM1", f)) < TOL

    def test_boundary_rhs(self):
        def g(x):
            return col(x[:, 1] * (1 - x[:, 1]), x[:, 2] ** 2, 0.5 * x[:, 0])

        prm = Params(Re=3.0, gamma=10.0)
        for w in (None, self.w):
            got = boundary_velocity_rhs(self.S["u"], prm, g, w)
            assert rel_diff(got, self.o.boundary_rhs(3.0, 10.0, g, w)) < TOL

    @pytest.mark.parametrize("var,family", [("A", "NED2"), ("u", "BDM1"), ("phi", "P2")])
    def test_interpolation(self, var, family):
        def f(x):
            return col(x[:, 2] ** 3 - x[:, 0], x[:, 0] * x[:, 1] ** 2, 1 + x[:, 0] * x[:, 2])

        g = (lambda x: f(x)[:, 0]) if family == "P2" else f
        assert rel_diff(self.S[var].interpolate(g), self.o.interpolate(family, g)) < TOL

    @pytest.mark.parametrize("var,family", [("A", "NED2"), ("u", "BDM1"), ("phi", "P2")])
    def test_boundary_dofs(self, var, family):
        assert np.array_equal(self.S[var].boundary_dofs, self.o.boundary_dofs(family))


# -- A_h ------------------------------------------------------------------------------
def test_Ah_zero_vector(spaces1):
    A = assemble_Ah(spaces1["u"], 1.0, 10.0)
    assert np.all(A @ np.zeros(A.shape[0]) == 0)


def test_Ah_symmetric(spaces2):
    A = dense(assemble_Ah(spaces2["u"], 1.0, 10.0))
    assert np.abs(A - A.T).max() <= 1e-12


def coercivity_constant(level):
    """Smallest generalized eigenvalue of A_h (Re = 1, gamma = 10) against the dg Gram matrix."""
    S = make_spaces(mesh_level(level))
    A = dense(assemble_Ah(S["u"], 1.0, 10.0))
    G = dense(assemble_dg_gram(S["u"]))
    return la.eigh(A, G, eigvals_only=True, subset_by_index=[0, 0])[0]


def test_dg_gram_matches_oracle(spaces1, oracle1):
    assert rel_diff(assemble_dg_gram(spaces1["u"]), oracle1.dg_gram()) < TOL


def test_Ah_coercive_on_random_field(spaces1, oracle1, rng):
    v = spaces1["u"].interpolate(lambda x: col(np.sin(3 * x[:, 1]), x[:, 0] * x[:, 2], np.cos(x[:, 0] + 2 * x[:, 2])))
    v /= np.linalg.norm(v)
    A = assemble_Ah(spaces1["u"], 1.0, 10.0)
    G = oracle1.dg_gram()
    theta = coercivity_constant(1)
    assert theta > 0
    assert v @ A @ v >= theta * (v @ G @ v) * (1 - 1e-12)


# -- O_h ------------------------------------------------------------------------------
def test_Oh_zero_velocity(spaces1):
    assert assemble_Oh(spaces1["u"], np.zeros(spaces1["u"].ndofs)).nnz == 0
    assert assemble_Oh(spaces1["u"], None).nnz == 0


def test_Oh_positivity_constant_wind(spaces1, oracle1, rng):
    w = spaces1["u"].interpolate(const([1.0, 0.0, 0.0]))
    O = assemble_Oh(spaces1["u"], w)
    for _ in range(5):
        v = rng.standard_normal(spaces1["u"].ndofs)
        assert v @ O @ v == pytest.approx(oracle1.jump_energy(w, v), rel=1e-12)


def test_Oh_positivity_identity(spaces1, oracle1, rng):
    for _ in range(20):
        w = solenoidal(spaces1["A"], spaces1["u"], rng.standard_normal(spaces1["A"].ndofs))
        assert np.abs(spaces1["u"].evaluate_div(w)).max() < 1e-12
        v = rng.standard_normal(spaces1["u"].ndofs)
        e = oracle1.jump_energy(w, v)
        assert e >= 0
        assert v @ assemble_Oh(spaces1["u"], w) @ v == pytest.approx(e, rel=1e-11)


def test_Oh_positivity_identity_finer_mesh(spaces2, rng):
    S = spaces2
    w = solenoidal(S["A"], S["u"], rng.standard_normal(S["A"].ndofs))
    O = dense(assemble_Oh(S["u"], w))
    assert la.eigvalsh(0.5 * (O + O.T)).min() > -1e-12


# -- other forms ----------------------------------------------------------------------------
def test_graddiv_values(spaces2):
    Vh = spaces2["u"]
    assert assemble_graddiv(Vh, 0.0).count_nonzero() == 0
    M = assemble_graddiv(Vh, 1.0)
    rot = Vh.interpolate(lambda x: col(x[:, 1], -x[:, 0], 0 * x[:, 0]))
    assert abs(rot @ M @ rot) < 1e-12
    stretch = Vh.interpolate(lambda x: col(x[:, 0], 0 * x[:, 0], 0 * x[:, 0]))
    assert stretch @ M @ stretch == pytest.approx(1.0, abs=1e-12)


def test_curlcurl_kernel_contains_gradients(spaces2, rng):
    C = assemble_curlcurl(spaces2["A"])
    s = rng.standard_normal(spaces2["phi"].ndofs)
    grad = discrete_gradient(spaces2["A"].mesh) @ s
    assert np.abs(C @ grad).max() < 1e-12 * np.abs(C).max() * np.abs(grad).max()
    e = spaces2["A"].interpolate(const([1.0, 0.0, 0.0]))
    assert abs(e @ C @ e) < 1e-12


def test_discrete_gradient_is_exact(spaces2, rng):
    s = rng.standard_normal(spaces2["phi"].ndofs)
    g = discrete_gradient(spaces2["A"].mesh) @ s
    bary = rng.dirichlet(np.ones(4), size=5)
    assert np.allclose(spaces2["A"].evaluate(g, bary), spaces2["phi"].evaluate_gradient(s, bary), atol=1e-12)


def test_curlcurl_energy_of_interpolant():
    m = mesh_level(3)
    Dh = make_spaces(m)["A"]
    a = Dh.interpolate(lambda x: col(np.sin(x[:, 2]), 0 * x[:, 0], 0 * x[:, 0]))
    c = Dh.evaluate_curl(a)
    direct = (m.volumes * (c**2).sum(1)).sum()
    assert a @ assemble_curlcurl(Dh) @ a == pytest.approx(direct, rel=1e-10)
    assert direct == pytest.approx(0.5 + np.sin(2.0) / 4.0, rel=2e-2)


def test_mixed_K_pairing(spaces1, oracle1, rng):
    S = spaces1
    K = assemble_mixed_K(S["H"], S["A"])
    assert np.all(K @ np.zeros(S["H"].ndofs) == 0)
    MK = oracle1.mixed_K()
    for _ in range(5):
        d, H = rng.standard_normal(S["A"].ndofs), rng.standard_normal(S["H"].ndofs)
        assert d @ K @ H == pytest.approx(d @ MK @ H, rel=1e-12)


def test_mixed_K_example_fields():
    m = mesh_level(3)
    S = make_spaces(m)
    H = S["H"].interpolate(lambda x: col(0 * x[:, 0], np.cos(x[:, 2]), 0 * x[:, 0]))
    d = S["A"].interpolate(lambda x: col(np.sin(x[:, 2]), 0 * x[:, 0], 0 * x[:, 0]))
    val = d @ assemble_mixed_K(S["H"], S["A"]) @ H
    assert val == pytest.approx(-(0.5 + np.sin(2.0) / 4.0), rel=2e-2)


def test_lorentz_analytic(spaces2):
    S = spaces2
    A_prev = S["A"].interpolate(lambda x: col(0 * x[:, 0], x[:, 0], 0 * x[:, 0]))
    c = curl_field(S["A"], A_prev)
    assert np.allclose(c, [0.0, 0.0, 1.0])
    v = S["u"].interpolate(const([1.0, 0.0, 0.0]))
    w = S["H"].interpolate(lambda x: col(x[:, 2], 0 * x[:, 0], 0 * x[:, 0]))
    assert np.allclose(S["H"].evaluate_curl(w), [0.0, 1.0, 0.0])
    kappa = 2.5
    assert v @ assemble_L(S["u"], S["H"], c, kappa) @ w == pytest.approx(kappa, rel=1e-12)
    assert assemble_L(S["u"], S["H"], curl_field(S["A"], None), kappa).count_nonzero() == 0


def test_grad_pairing_examples(spaces2):
    S = spaces2
    G = assemble_grad(S["A"], S["phi"])
    assert np.abs(G.T @ np.ones(S["phi"].ndofs)).max() < 1e-12
    s = S["phi"].interpolate(lambda x: x[:, 2])
    f = S["A"].interpolate(const([0.0, 0.0, 1.0]))
    assert s @ G @ f == pytest.approx(1.0, abs=1e-12)


def test_grad_matches_stiffness_on_gradients(spaces2, rng):
    S = spaces2
    s = rng.standard_normal(S["phi"].ndofs)
    grad = discrete_gradient(S["A"].mesh) @ s
    L = assemble_scalar_stiffness(S["phi"])
    G = assemble_grad(S["A"], S["phi"])
    assert np.abs(G @ grad - L @ s).max() < 1e-12 * max(1.0, np.abs(L @ s).max())


def test_divergence_block(spaces2):
    S = spaces2
    B = assemble_B(S["u"], S["p"])
    rot = S["u"].interpolate(lambda x: col(x[:, 1], -x[:, 0], 0 * x[:, 0]))
    assert np.abs(B @ rot).max() < 1e-13
    stretch = S["u"].interpolate(lambda x: col(x[:, 0], 0 * x[:, 0], 0 * x[:, 0]))
    assert np.ones(S["p"].ndofs) @ B @ stretch == pytest.approx(-1.0, abs=1e-12)


def test_divergence_inf_sup(spaces1):
    sv = la.svdvals(dense(assemble_B(spaces1["u"], spaces1["p"])))
    assert sv.min() > 1e-3 * sv.max()


def test_masses(spaces1, spaces2):
    Mp = dense(assemble_mass(spaces1["p"]))
    assert np.allclose(Mp, np.diag(spaces1["p"].mesh.volumes), atol=1e-15)
    e = spaces1["A"].interpolate(const([1.0, 1.0, 1.0]))
    assert e @ assemble_mass(spaces1["A"]) @ e == pytest.approx(3.0, abs=1e-12)
    la.cholesky(dense(assemble_mass(spaces2["H"])))


def test_stiffness_values(spaces2):
    Y = spaces2["phi"]
    L = assemble_scalar_stiffness(Y)
    assert np.abs(L @ np.ones(Y.ndofs)).max() < 1e-12
    z = Y.interpolate(lambda x: x[:, 2])
    assert z @ L @ z == pytest.approx(1.0, abs=1e-12)
    assert z @ assemble_scalar_stiffness(spaces2["r"], 10.0) @ z == pytest.approx(10.0, abs=1e-11)


def test_Su_reduces_to_F_without_state(spaces1):
    prm = Params(Re=10.0, Rm=2.0, kappa=3.0)
    Su = assemble_Su(spaces1["u"], spaces1["A"], prm)
    ref = assemble_Ah(spaces1["u"], prm.Re, prm.gamma) + assemble_graddiv(spaces1["u"], prm.alpha)
    assert rel_diff(Su, ref) < TOL


def test_Su_coupling_density(spaces2):
    S = spaces2
    prm = Params(Re=1.0, Rm=4.0, kappa=3.0)
    A_prev = S["A"].interpolate(lambda x: col(0 * x[:, 0], x[:, 0], 0 * x[:, 0]))
    v = S["u"].interpolate(const([1.0, 0.0, 0.0]))
    extra = assemble_Su(S["u"], S["A"], prm, None, A_prev) - assemble_F(S["u"], prm, None)
    assert v @ extra @ v == pytest.approx(prm.kappa * prm.Rm, rel=1e-12)


def test_Su_positive(spaces2, rng):
    S = spaces2
    prm = Params(Re=100.0, Rm=10.0, kappa=1.0)
    w = solenoidal(S["A"], S["u"], rng.standard_normal(S["A"].ndofs))
    Su = dense(assemble_Su(S["u"], S["A"], prm, w, rng.standard_normal(S["A"].ndofs)))
    assert la.eigvalsh(0.5 * (Su + Su.T)).min() > 0


# -- right-hand side and system wiring ---------------------------------------------------------
def test_rhs_homogeneous_is_zero(spaces1):
    b = assemble_rhs(spaces1, Params(), ProblemData())
    assert all(np.all(seg == 0) for seg in b.values())


def test_rhs_constant_force(spaces1, oracle1):
    f = const([1.0, 0.0, 0.0])
    b = assemble_rhs(spaces1, Params(), ProblemData(f=f))
    assert rel_diff(b["u"], oracle1.load("BDM1", f)) < TOL
    # (f, v) of the basis functions of a face sums to the face-normal flux of f times volume factors:
    # for f constant, sum_i (f, phi_i) c_i = (f, v) for v = I_h f, i.e. |Omega| |f|^2
    v = spaces1["u"].interpolate(f)
    assert b["u"] @ v == pytest.approx(1.0, abs=1e-12)


def test_rhs_example1_nonzero(spaces1):
    case = manufactured_case_example1()
    system = build_system(spaces1, case.params, case.problem_data())
    b = system.split(system.vector())
    for v in ("u", "H", "A"):
        assert np.linalg.norm(b[v]) > 0


def _system(spaces, rng):
    prm = Params(Re=10.0, Rm=3.0, kappa=2.0, alpha=1.0)
    data = cavity_benchmark(spaces["u"].mesh, prm)
    u_prev = solenoidal(spaces["A"], spaces["u"], rng.standard_normal(spaces["A"].ndofs))
    A_prev = rng.standard_normal(spaces["A"].ndofs)
    return prm, data, u_prev, A_prev, build_system(spaces, prm, data, u_prev, A_prev)


def test_block_layout_matches_forms(spaces1, rng):
    S = spaces1
    prm, data, u_prev, A_prev, system = _system(S, rng)
    x = {v: rng.standard_normal(S[v].ndofs) for v in VARIABLES}
    y = system.full_matrix() @ np.concatenate([x[v] for v in VARIABLES])
    off = system.offsets(False)
    out = {v: y[off[k]:off[k + 1]] for k, v in enumerate(VARIABLES)}
    G = assemble_grad(S["A"], S["phi"])
    D = assemble_grad(S["H"], S["r"])
    J = assemble_L(S["u"], S["H"], curl_field(S["A"], A_prev), prm.kappa)
    F = assemble_F(S["u"], prm, u_prev)
    B = assemble_B(S["u"], S["p"])
    ref = {
        "A": assemble_curlcurl(S["A"]) @ x["A"] + G.T @ x["phi"] + assemble_mixed_K(S["H"], S["A"]) @ x["H"],
        "phi": G @ x["A"],
        "H": assemble_curlcurl(S["H"], prm.kappa / prm.Rm) @ x["H"] + D.T @ x["r"] + J.T @ x["u"],
        "r": D @ x["H"],
        "u": -J @ x["H"] + F @ x["u"] + B.T @ x["p"],
        "p": B @ x["u"],
    }
    for v in VARIABLES:
        assert np.allclose(out[v], ref[v], rtol=0, atol=1e-12 * max(1.0, np.abs(ref[v]).max())), v


def test_zero_blocks_absent_and_lorentz_skew(spaces1, rng):
    _, _, _, _, system = _system(spaces1, rng)
    pattern = [[system.layout()[i][j] is not None for j in range(6)] for i in range(6)]
    assert pattern == [
        [True, True, True, False, False, False],
        [True, False, False, False, False, False],
        [False, False, True, True, True, False],
        [False, False, True, False, False, False],
        [False, False, True, False, True, True],
        [False, False, False, False, True, False],
    ]
    H_row_u = dense(system.block(2, 4, free=False))
    u_row_H = dense(system.block(4, 2, free=False))
    assert np.abs(u_row_H + H_row_u.T).max() < 1e-12


def test_static_blocks_match_direct_assembly(spaces1):
    prm = Params(Re=5.0, Rm=2.0, kappa=4.0, alpha=0.5)
    st = assemble_static(spaces1, prm, ProblemData())
    assert rel_diff(st.HH, assemble_curlcurl(spaces1["H"], 2.0)) < TOL
    assert rel_diff(st.L_r, assemble_scalar_stiffness(spaces1["r"], 0.5)) < TOL
    assert rel_diff(st.graddiv, assemble_graddiv(spaces1["u"], 0.5)) < TOL


def test_essential_values_cavity(spaces2):
    m = spaces2["u"].mesh
    data = cavity_benchmark(m, Params())
    ess = essential_values(spaces2, data)
    idx, val = ess["H"]
    full = np.zeros(spaces2["H"].ndofs)
    full[idx] = val
    ref = spaces2["H"].interpolate(const([-1.0, 0.0, 0.0]))
    assert np.allclose(full[idx], ref[idx])
    idx, val = ess["A"]
    ref = spaces2["A"].interpolate(lambda x: col(0 * x[:, 0], 0 * x[:, 0], -x[:, 1]))
    assert np.allclose(val, ref[idx])
    assert len(ess["p"][0]) == 0


def test_params_validation():
    with pytest.raises(ValueError):
        Params(Re=0.0)
    with pytest.raises(ValueError):
        Params(gamma=-1.0)
    with pytest.raises(ValueError):
        Params(alpha=-0.1)


def test_matrix_market_round_trip(spaces1, tmp_path):
    M = assemble_curlcurl(spaces1["A"])
    path = export_matrix_market(M, tmp_path / "curlcurl", comment="curl-curl on T1")
    assert path.suffix == ".mtx"
    back = scipy.io.mmread(str(path))
    assert rel_diff(back, M) < 1e-15

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import circle_mode_gap, circle_punched_constant, double_sum_form
from rieszlab import fpquad as F
from rieszlab.geometry import Circle, Component, ConfigurationError, Grid, ManifoldSpec, Sphere, Torus

BETAS = [0.5, 1.0, 1.5]


def circle(R=1.0, N=128):
    spec = ManifoldSpec([Component(Circle(R))])
    return spec, Grid(spec, [N])


def kern(beta, c=0.5, n=2):
    return F.KernelSpec(1 - beta, n, c)


@pytest.fixture(scope="module")
def circle_V():
    _, g = circle(N=128)
    return g, {b: F.assemble_V(g, kern(b)) for b in BETAS}


@pytest.mark.parametrize("beta", BETAS)
@pytest.mark.parametrize("k", [1, 3, 7])
def test_circle_eigenvalue_differences_match_direct_integral(beta, k):
    gap = F.circle_eigenvalue(k, beta) - F.circle_eigenvalue(0, beta)
    assert gap == pytest.approx(circle_mode_gap(k, beta), rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(beta=st.floats(0.05, 1.95), k=st.integers(2000, 10**6))
def test_circle_eigenvalue_approaches_symbol(beta, k):
    lam = F.circle_eigenvalue(k, beta)
    sym = F.symbol_constant(2, beta) * k**beta
    assert np.isfinite(lam)
    assert lam / sym == pytest.approx(1.0, abs=2e-3)


@pytest.mark.parametrize("beta", BETAS)
def test_assembled_rayleigh_quotients_match_exact_eigenvalues(circle_V, beta):
    g, Vs = circle_V
    u = g.components[0].params[:, 0]
    for k in (0, 2, 5, 11):
        phi = np.cos(k * u)
        lam = Vs[beta].form(phi) / np.sum(g.W * phi**2)
        assert lam == pytest.approx(F.circle_eigenvalue(k, beta), rel=1e-8, abs=1e-8)


@pytest.mark.parametrize("beta", BETAS)
def test_fourier_modes_diagonalize_V(circle_V, beta):
    g, Vs = circle_V
    u = g.components[0].params[:, 0]
    a, b = np.cos(3 * u), np.cos(5 * u)
    assert abs(Vs[beta].form(a, b)) < 1e-8 * abs(Vs[beta].form(a))


def test_radius_scaling():
    beta = 0.5
    _, g1 = circle(1.0, 64)
    _, g2 = circle(2.0, 64)
    V1 = F.assemble_V(g1, kern(beta, 0.5))
    V2 = F.assemble_V(g2, kern(beta, 1.0))
    u = g1.components[0].params[:, 0]
    phi = np.cos(4 * u)
    q1 = V1.form(phi) / np.sum(g1.W * phi**2)
    q2 = V2.form(phi) / np.sum(g2.W * phi**2)
    assert q2 == pytest.approx(2.0**-beta * q1, rel=1e-9)


@pytest.mark.parametrize("beta", BETAS)
def test_V_applied_to_one_equals_h(circle_V, beta):
    g, Vs = circle_V
    spec = g.spec
    v1 = Vs[beta].operator @ np.ones(g.size)
    h = F.h_scalar(spec, kern(beta), 0, [0.3])
    assert np.allclose(v1, h, rtol=1e-9)
    assert h == pytest.approx(F.circle_eigenvalue(0, beta), rel=1e-9)


@pytest.mark.parametrize("beta", [0.5, 1.5])
def test_h_does_not_depend_on_splitting_radius(beta):
    spec, _ = circle()
    a = F.h_terms(spec, kern(beta, 0.5), 0, [1.0])
    b = F.h_terms(spec, kern(beta, 0.25), 0, [1.0])
    assert a["h"] == pytest.approx(b["h"], rel=1e-10)
    assert np.allclose(a["hvec"], b["hvec"], atol=1e-10)


def test_hvec_on_circle_points_inward():
    spec, _ = circle()
    u = 0.7
    hv = F.h_vector(spec, kern(1.5), 0, [u])
    x = np.array([np.cos(u), np.sin(u)])
    # by symmetry the vector is radial; the kernel mass is on the inside
    assert abs(hv[0] * x[1] - hv[1] * x[0]) < 1e-10
    assert hv @ x < 0


@pytest.mark.parametrize("beta", BETAS)
@pytest.mark.parametrize("delta", [0.1, 0.2, 0.4])
def test_punched_constant_against_quadrature(beta, delta):
    _, g = circle(N=256)
    Pn = F.assemble_punched(g, kern(beta), delta)
    ones = np.ones(g.size)
    assert Pn.form(ones) == pytest.approx(circle_punched_constant(beta, delta), rel=1e-9)


def test_punched_beyond_diameter_is_zero():
    _, g = circle(N=64)
    Pn = F.assemble_punched(g, kern(1.0), 2.5)
    assert not Pn.A.any()


def test_punched_form_against_brute_force_double_sum():
    # smooth density, large cut: the punched integrand is smooth away from a
    # jump, so a fine trapezoidal double sum converges (first order at the jump)
    beta, delta = 1.0, 0.3
    _, g = circle(N=128)
    u = g.components[0].params[:, 0]
    phi = 1 + 0.5 * np.cos(u)
    Pn = F.assemble_punched(g, kern(beta), delta)
    Nf = 2048
    t = np.arange(Nf) * 2 * np.pi / Nf
    X = np.stack([np.cos(t), np.sin(t)], 1)
    r = np.sqrt(((X[:, None] - X[None]) ** 2).sum(-1))
    np.fill_diagonal(r, np.inf)
    K = np.where(r >= delta, r ** (-1 - beta), 0.0)
    pf = 1 + 0.5 * np.cos(t)
    w = 2 * np.pi / Nf
    ref = w * w * pf @ K @ pf
    assert Pn.form(phi) == pytest.approx(ref, rel=5e-3)


def test_double_sum_helper_matches_vectorized():
    X = np.random.default_rng(0).standard_normal((6, 2))
    W = np.ones(6)
    phi = np.arange(6.0)
    k = lambda x, y: np.linalg.norm(x - y) ** -1.5
    r = np.sqrt(((X[:, None] - X[None]) ** 2).sum(-1))
    np.fill_diagonal(r, np.inf)
    assert double_sum_form((X, W), k, phi) == pytest.approx(phi @ (r**-1.5) @ phi)


@pytest.mark.parametrize("beta", BETAS)
def test_compensator_identity(beta):
    _, g = circle(N=128)
    k = kern(beta)
    V = F.assemble_V(g, k)
    P, Pp, Pn = F.assemble_P(g, k, 0.2, V=V)
    assert np.allclose(P.A + Pn.A, V.A, atol=1e-12 * np.abs(V.A).max())
    shift = 0.2 ** -beta / (beta * k.cm)
    assert np.allclose(Pp.A - P.A, shift * np.diag(g.W))


def test_compensator_prime_on_constants_vanishes_with_delta():
    # P'(1) = 2 pi fp int_{|t|<t(delta)} ... is O(delta^(2-beta)) for smooth phi
    beta = 1.0
    _, g = circle(N=512)
    k = kern(beta)
    V = F.assemble_V(g, k)
    ones = np.ones(g.size)
    vals = [abs(F.assemble_P(g, k, d, V=V)[1].form(ones)) for d in (0.05, 0.1, 0.2)]
    slope = np.polyfit(np.log([0.05, 0.1, 0.2]), np.log(vals), 1)[0]
    assert slope == pytest.approx(2 - beta, abs=0.1)


def test_delta_below_grid_resolution_is_rejected():
    _, g = circle(N=64)
    with pytest.raises(ConfigurationError, match=r"delta=.*4\*h_grid="):
        F.assemble_punched(g, kern(1.0), 0.05)
    Pn = F.assemble_punched(g, kern(1.0), 0.05, allow_subgrid=True)
    assert np.isfinite(Pn.A).all()


def test_splitting_radius_limits():
    spec = ManifoldSpec([Component(Torus(2.0, 0.5))])
    g = Grid(spec, [(16, 16)])
    with pytest.raises(ConfigurationError):
        F.assemble_V(g, kern(1.0, c=0.49, n=3))


def test_kernel_spec_validation():
    with pytest.raises(ConfigurationError):
        F.KernelSpec(1.2, 2, 0.5)
    with pytest.raises(ConfigurationError):
        F.KernelSpec(0.0, 2, -1.0)
    with pytest.raises(ConfigurationError):
        F.KernelSpec(0.0, 2, 0.5, orientation=0)


def test_symbol_constant_is_negative():
    for n in (2, 3):
        for b in np.linspace(0.1, 1.9, 7):
            assert F.symbol_constant(n, b) < 0
    assert F.symbol_constant(2, 1.0) == pytest.approx(-np.pi)


@settings(max_examples=50, deadline=None)
@given(rho=st.floats(0, 2), c=st.floats(0.1, 1.0))
def test_cutoff_bounds_and_support(rho, c):
    chi = float(F.cutoff(rho, c))
    assert 0.0 <= chi <= 1.0
    if rho <= c / 2:
        assert chi == 1.0
    if rho >= c:
        assert chi == 0.0


def test_cutoff_monotone():
    r = np.linspace(0, 1, 2001)
    assert np.all(np.diff(F.cutoff(r, 0.8, 0.3)) <= 0)


def test_save_load_roundtrip(tmp_path, circle_V):
    g, Vs = circle_V
    V = Vs[0.5]
    p = tmp_path / "v.rzlb"
    V.save(p)
    head, A = F.OperatorMatrix.load(p)
    assert head["N"] == g.size and head["variant"] == "fp_full"
    assert head["alpha"] == pytest.approx(0.5) and head["delta"] is None
    assert np.array_equal(A, V.A)
    assert p.stat().st_size == F._HEADER.size + 8 * g.size**2


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"XXXX" + bytes(100))
    with pytest.raises(ValueError):
        F.OperatorMatrix.load(p)


@pytest.fixture(scope="module")
def torus_V():
    spec = ManifoldSpec([Component(Torus(2.0, 0.5))])
    g = Grid(spec, [(16, 16)])
    k = kern(1.0, c=0.2, n=3)
    return g, k, F.assemble_V(g, k)


def test_assembly_is_nearly_symmetric_before_symmetrization(torus_V):
    assert torus_V[2].asymmetry < 1e-2


def test_torus_V_applied_to_one_equals_h(torus_V):
    g, k, V = torus_V
    v1 = V.operator @ np.ones(g.size)
    cg = g.components[0]
    for i in (0, 5, 17):
        h = F.h_scalar(g.spec, k, 0, cg.params[i])
        assert v1[i] == pytest.approx(h, rel=5e-4)


def test_hypersingular_sphere_kills_constants_and_scales_harmonics():
    spec = ManifoldSpec([Component(Sphere(1.0))])
    g = Grid(spec, [(16, 16)])
    D = F.assemble_D(g)
    K = D.operator
    scale = np.abs(K).sum(1).max()
    assert np.abs(K @ np.ones(g.size)).max() < 1e-3 * scale
    z = g.points[:, 2]
    q = D.form(z) / np.sum(g.W * z * z)
    assert abs(q) == pytest.approx(2 / 3, rel=0.05)

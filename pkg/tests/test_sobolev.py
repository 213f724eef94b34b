import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rieszlab import fpquad as F
from rieszlab import sobolev as S
from rieszlab.geometry import Circle, Component, ConfigurationError, Grid, ManifoldSpec, Sphere, Torus


def circle_grid(N=64, R=1.0):
    return Grid(ManifoldSpec([Component(Circle(R))]), [N])


@pytest.mark.parametrize("s", [0.25, 0.5, 1.0])
@pytest.mark.parametrize("k", [0, 1, 5])
def test_fourier_modes_get_their_multiplier(s, k):
    g = circle_grid()
    u = g.components[0].params[:, 0]
    phi = np.cos(k * u)
    G = S.gram(g, s)
    assert G.norm2(phi) == pytest.approx((1 + k * k) ** s * np.sum(g.W * phi**2), rel=1e-12)


def test_order_zero_is_the_mass_matrix():
    g = Grid(ManifoldSpec([Component(Torus(2.0, 0.5))]), [(16, 16)])
    assert np.allclose(S.gram(g, 0.0).S, S.mass(g), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), s=st.floats(0.0, 1.0))
def test_gram_is_symmetric_positive_and_monotone_in_order(seed, s):
    g = circle_grid(32)
    phi = np.random.default_rng(seed).standard_normal(g.size)
    a = S.gram(g, s).norm2(phi)
    b = S.gram(g, s + 0.25).norm2(phi)
    assert 0 < a <= b * (1 + 1e-12)


def test_gram_rejects_sphere():
    g = Grid(ManifoldSpec([Component(Sphere(1.0))]), [(16, 16)])
    with pytest.raises(ConfigurationError):
        S.gram(g, 0.5)


def test_h_eps_norm():
    g = circle_grid()
    A = np.diag(g.W)
    phi = np.ones(g.size)
    val, degenerate = S.h_eps_norm(A, g.W, phi, 0.5)
    assert val == pytest.approx(1.5 * 2 * np.pi)
    assert not degenerate
    val, degenerate = S.h_eps_norm(-3 * A, g.W, phi, 0.5)
    assert degenerate
    with pytest.raises(ValueError):
        S.h_eps_norm(A, g.W, phi, -1.0)


@pytest.fixture(scope="module")
def pencil_case():
    g = circle_grid(64)
    beta = 1.5
    V = F.assemble_V(g, F.KernelSpec(1 - beta, 2, 0.5))
    return g, beta, V


def test_required_shift_makes_form_semidefinite(pencil_case):
    g, beta, V = pencil_case
    A = -V.A
    c1 = S.required_shift(A, g.W)
    ev = np.linalg.eigvalsh(A + c1 * np.diag(g.W))
    assert ev.min() > -1e-9 * np.abs(ev).max()
    # exact: the only negative mode of -V at beta = 1.5 is the constant, lambda0 = +0.618
    assert c1 == pytest.approx(F.circle_eigenvalue(0, beta), rel=1e-8)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_pencil_bounds_hold_for_random_densities(pencil_case, seed):
    g, beta, V = pencil_case
    A = -V.A
    Sg = S.gram(g, beta / 2)
    pr = S.garding_pencil(A, g.W, Sg.S, orientation=-1)
    phi = np.random.default_rng(seed).standard_normal(g.size)
    lhs = phi @ (A + pr.c1 * np.diag(g.W)) @ phi
    assert pr.c0 * Sg.norm2(phi) <= lhs * (1 + 1e-10)
    assert phi @ A @ phi <= pr.c2 * Sg.norm2(phi) * (1 + 1e-10)
    assert pr.c0 > 0


def test_circle_pencil_against_exact_spectrum(pencil_case):
    # for Fourier-diagonal forms the pencil minimum is min_k (-lambda_k + c1)/(1+k^2)^(beta/2)
    g, beta, V = pencil_case
    A = -V.A
    c1 = 2.0
    ks = np.arange(0, 32)
    exact = min((-F.circle_eigenvalue(k, beta) + c1) / (1 + k * k) ** (beta / 2) for k in ks)
    got = S.pencil_min(A, g.W, S.gram(g, beta / 2).S, c1)
    assert got == pytest.approx(exact, rel=1e-7)


def test_orientation_selection_picks_the_measured_sign():
    gc, gf = circle_grid(32), circle_grid(64)
    k = F.KernelSpec(0.0, 2, 0.5)
    Vc, Vf = F.assemble_V(gc, k), F.assemble_V(gf, k)
    ch = S.select_orientation(Vc.A, Vc.W, Vf.A, Vf.W)
    assert ch.orientation == -1
    a, b = ch.shifts["1"]
    assert b > 1.5 * a

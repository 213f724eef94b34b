import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rieszlab import martensen as M
from rieszlab.geometry import Circle, Component, Ellipse, ManifoldSpec, Sphere, Torus, jets


def spec_of(shape):
    return ManifoldSpec([Component(shape)])


def unit_direction(shape, u0, omega):
    """Parameter direction at ``u0`` of metric length one and angle ``omega``."""
    d = jets(shape, np.atleast_2d(u0))
    g = d["g"][0]
    if shape.m == 1:
        return np.array([1.0 / np.sqrt(g[0, 0])])
    L = np.linalg.cholesky(g)
    return np.linalg.solve(L.T, np.array([np.cos(omega), np.sin(omega)]))


@pytest.mark.parametrize("R", [0.5, 1.0, 2.0])
def test_circle_ray_is_an_arcsine(R):
    spec = spec_of(Circle(R))
    rho = np.linspace(0.05, 1.5, 12) * R
    ray = M.ray_solve(spec, 0, [0.3], [1.0 / R], 1.6 * R, samples=rho)
    assert np.allclose(ray.u[:, 0] - 0.3, 2 * np.arcsin(rho / (2 * R)), atol=1e-10)


@settings(max_examples=15, deadline=None)
@given(u=st.floats(0, 2 * np.pi), v=st.floats(0, 2 * np.pi), om=st.floats(0, 2 * np.pi))
def test_torus_rays_keep_chord_equal_to_radius(u, v, om):
    T = Torus(2.0, 0.5)
    spec = spec_of(T)
    u0 = np.array([u, v])
    th = unit_direction(T, u0, om)
    rho = np.linspace(0.02, 0.3, 8)
    ray = M.ray_solve(spec, 0, u0, th, 0.31, samples=rho)
    x0 = spec.components[0].embed(u0[None])[0]
    chord = np.linalg.norm(spec.components[0].embed(ray.u) - x0, axis=1)
    assert np.allclose(chord, rho, atol=1e-9)


@pytest.mark.parametrize("rho", [0.1, 0.5, 1.0, 1.5])
def test_sphere_polar_jacobian_is_rho(rho):
    S = Sphere(1.0)
    spec = spec_of(S)
    u0 = np.array([1.0, 0.5])
    th = unit_direction(S, u0, 0.4)
    assert M.jacobian_numeric(spec, 0, u0, th, rho) == pytest.approx(rho, rel=1e-8)


def test_unnormalized_direction_is_rejected():
    with pytest.raises(ValueError):
        M.ray_solve(spec_of(Torus(2.0, 0.5)), 0, [0.1, 0.2], [1.0, 1.0], 0.2)


def test_sphere_chord_cap_area():
    # the sphere area inside a chord ball of radius rho is pi rho^2
    spec = spec_of(Sphere(1.0))
    for rho in (0.2, 0.6):
        rule = M.polar_quadrature(spec, 0, [1.1, 0.3], rho)
        assert rule.integrate(lambda X: np.ones(len(X))) == pytest.approx(np.pi * rho**2, rel=1e-10)


def test_circle_chord_arc_length():
    spec = spec_of(Circle(1.0))
    rho = 0.8
    rule = M.polar_quadrature(spec, 0, [0.0], rho)
    assert rule.integrate(lambda X: np.ones(len(X))) == pytest.approx(4 * np.arcsin(rho / 2), rel=1e-12)


def test_polar_rule_integrates_linear_functions_on_torus():
    # the chord disk on a torus is symmetric enough that first moments
    # match a direct parameter-space quadrature of the same region
    T = Torus(2.0, 0.5)
    spec = spec_of(T)
    u0 = np.array([0.2, 0.9])
    rho = 0.25
    rule = M.polar_quadrature(spec, 0, u0, rho, orders=(32, 48))
    x0 = spec.components[0].embed(u0[None])[0]
    n = 800
    uu = u0[0] + np.linspace(-0.3, 0.3, n)
    vv = u0[1] + np.linspace(-0.8, 0.8, n)
    U = np.stack(np.meshgrid(uu, vv, indexing="ij"), -1).reshape(-1, 2)
    X = spec.components[0].embed(U)
    inside = np.linalg.norm(X - x0, axis=1) <= rho
    J = (2.0 + 0.5 * np.cos(U[:, 1])) * 0.5
    dA = (uu[1] - uu[0]) * (vv[1] - vv[0])
    for f in (lambda Y: np.ones(len(Y)), lambda Y: Y[:, 2]):
        ref = np.sum(f(X)[inside] * J[inside]) * dA
        assert rule.integrate(f) == pytest.approx(ref, rel=5e-3)


@pytest.mark.parametrize("shape,u0", [
    (Torus(2.0, 0.5), [0.4, 0.7]),
    (Ellipse(1.0, 0.6), [0.9]),
    (Sphere(1.0), [0.4, 0.7]),
])
def test_series_orders_one_and_two_match_numeric_rays(shape, u0):
    rows = M.martensen_table(spec_of(shape), 0, np.array(u0))
    asserted = [r for r in rows if r["asserted"]]
    assert asserted
    assert max(r["abs_diff"] for r in asserted) < 1e-6
    assert {r["order"][:2] for r in asserted} <= {"u1", "u2"}


def test_first_order_coefficient_is_the_direction():
    T = Torus(2.0, 0.5)
    j = jets(T, np.array([[0.1, 0.2]]))
    from rieszlab.geometry import jet
    th = unit_direction(T, np.array([0.1, 0.2]), 1.0)
    ex = M.ray_expansion(jet(spec_of(T), 0, [0.1, 0.2]), th)
    assert np.allclose(ex.c1, th)
    assert np.allclose(ex.c2, -0.5 * np.einsum("ljk,j,k->l", j["Gam"][0], th, th))

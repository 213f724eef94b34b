import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import zeta

from oracles import equally_spaced_limit
from rieszlab import discrete as D
from rieszlab.geometry import Circle, Component, ManifoldSpec, Sphere, Torus

seeds = st.integers(0, 2**32 - 1)


def spec_of(shape):
    return ManifoldSpec([Component(shape)])


def brute_energy(X, s):
    E = 0.0
    for i in range(len(X)):
        for j in range(len(X)):
            if i != j:
                E += np.linalg.norm(X[i] - X[j]) ** -s
    return E


@settings(max_examples=25, deadline=None)
@given(seed=seeds, s=st.floats(0.5, 4.0))
def test_energy_matches_double_loop(seed, s):
    X = np.random.default_rng(seed).standard_normal((7, 3))
    assert D.discrete_energy(X, s) == pytest.approx(brute_energy(X, s), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=seeds, s=st.floats(0.5, 3.0))
def test_gradient_matches_finite_differences(seed, s):
    X = np.random.default_rng(seed).standard_normal((6, 2))
    _, g = D.energy_gradient(X, s)
    h = 1e-6
    for i, k in [(0, 0), (3, 1), (5, 0)]:
        Xp, Xm = X.copy(), X.copy()
        Xp[i, k] += h
        Xm[i, k] -= h
        fd = (D.discrete_energy(Xp, s) - D.discrete_energy(Xm, s)) / (2 * h)
        assert g[i, k] == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_coincident_points_are_rejected():
    with pytest.raises(D.InfiniteEnergyError):
        D.discrete_energy(np.array([[0.0, 1.0], [0.0, 1.0], [1.0, 0.0]]), 2.0)


@pytest.mark.parametrize("s", [1.5, 2.0, 2.5])
def test_direct_summation_oracle_matches_zeta_closed_form(s):
    assert equally_spaced_limit(s) == pytest.approx(2 * zeta(s) / (2 * np.pi) ** s, rel=1e-10)


@pytest.mark.parametrize("N,s", [(12, 2.0), (17, 1.5), (24, 3.0)])
def test_circle_optimum_is_equally_spaced(N, s):
    spec = spec_of(Circle(1.0))
    cfg = D.optimize_points(spec, 0, N, s, seed=1, restarts=2)
    ref = D.equally_spaced_energy(N, s)
    assert cfg.energy <= ref * (1 + 1e-12) + 1e-9
    assert cfg.energy == pytest.approx(ref, rel=1e-12)
    u = np.sort(cfg.params[:, 0])
    gaps = np.diff(np.r_[u, u[0] + 2 * np.pi])
    assert np.allclose(gaps, 2 * np.pi / N, rtol=1e-6)


def test_octahedron_on_the_sphere():
    spec = spec_of(Sphere(1.0))
    # the octahedron is optimal for every s; s must exceed the dimension 2
    cfg = D.optimize_points(spec, 0, 6, 3.0, seed=0, restarts=3)
    exact = 6 * (4 * 2**-1.5 + 1 / 8)
    assert cfg.energy == pytest.approx(exact, rel=1e-9)
    assert np.allclose(np.linalg.norm(cfg.points, axis=1), 1)


def test_torus_points_stay_on_the_surface():
    T = Torus(2.0, 0.5)
    spec = spec_of(T)
    cfg = D.optimize_points(spec, 0, 10, 3.0, seed=2, restarts=1, max_iter=300)
    X = cfg.points
    rho = np.hypot(X[:, 0], X[:, 1])
    assert np.allclose((rho - 2.0) ** 2 + X[:, 2] ** 2, 0.25)


def test_determinism_and_seed_sensitivity():
    spec = spec_of(Circle(1.0))
    a = D.optimize_points(spec, 0, 9, 2.0, seed=5, restarts=2, polish=False, max_iter=50)
    b = D.optimize_points(spec, 0, 9, 2.0, seed=5, restarts=2, polish=False, max_iter=50)
    c = D.optimize_points(spec, 0, 9, 2.0, seed=6, restarts=2, polish=False, max_iter=50)
    assert np.array_equal(a.params, b.params)
    assert not np.array_equal(a.params, c.params)


def test_threaded_restarts_give_the_same_answer():
    spec = spec_of(Circle(1.0))
    a = D.optimize_points(spec, 0, 9, 2.0, seed=5, restarts=3, max_iter=200)
    b = D.optimize_points(spec, 0, 9, 2.0, seed=5, restarts=3, max_iter=200, threads=3)
    assert np.array_equal(a.params, b.params)


def test_rng_streams_are_independent_and_reproducible():
    a = [r.random(3) for r in D.rng_streams(42, 3)]
    b = [r.random(3) for r in D.rng_streams(42, 3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], a[1])


def test_invalid_exponent_rejected():
    with pytest.raises(ValueError):
        D.optimize_points(spec_of(Circle(1.0)), 0, 5, 0.5)


def test_equally_spaced_points_have_tiny_gap():
    spec = spec_of(Circle(1.0))
    t = 2 * np.pi * np.arange(64) / 64
    gap = D.equidistribution_gap(spec, 0, np.stack([np.cos(t), np.sin(t)], 1))
    assert gap < 1e-14
    clumped = np.stack([np.cos(t / 4), np.sin(t / 4)], 1)
    assert D.equidistribution_gap(spec, 0, clumped) > 1e-2


def test_test_bank_shape():
    E = D.test_bank(3)
    assert E.shape == (20, 3)
    assert E.sum(1).min() >= 1
    assert len({tuple(e) for e in E}) == 20


def test_scaling_fit_on_exact_configurations():
    spec = spec_of(Circle(1.0))
    s = 2.0
    Ns = [16, 32, 64, 128]
    confs = []
    for N in Ns:
        t = 2 * np.pi * np.arange(N) / N
        X = np.stack([np.cos(t), np.sin(t)], 1)
        confs.append(D.PointConfiguration(t[:, None], X, s, 0, D.equally_spaced_energy(N, s)))
    res = D.scaling_fit(spec, 0, s, Ns, configs=confs)
    assert res.fits["limit"] == pytest.approx(2 * zeta(s) / (2 * np.pi) ** s, rel=1e-10)
    with pytest.raises(ValueError):
        D.scaling_fit(spec, 0, s, Ns[:3], configs=confs[:3])

"""Discrete minimal Riesz s-energy configurations on a single component.

Energies exclude self-interactions, ``E_s = sum_{i != j} |x_i - x_j|^-s``, and
scale like ``N^(1 + s/d)`` with ``d`` the manifold dimension.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .geometry import ConfigurationError, Grid, ManifoldSpec
from .gauss import SweepResult

__all__ = ["InfiniteEnergyError", "PointConfiguration", "discrete_energy", "energy_gradient",
           "optimize_points", "scaling_fit", "equidistribution_gap", "equally_spaced_energy",
           "test_bank", "rng_streams"]


class InfiniteEnergyError(ValueError):
    """Raised for coincident points."""


@dataclass
class PointConfiguration:
    params: np.ndarray
    points: np.ndarray
    s: float
    seed: int
    energy: float
    component: int = 0
    restart_energies: list = field(default_factory=list)
    iterations: int = 0

    @property
    def N(self):
        return len(self.points)

    @property
    def restart_spread(self):
        e = np.asarray(self.restart_energies)
        return float((e.max() - e.min()) / e.min()) if len(e) else 0.0


def rng_streams(seed, k):
    """``k`` independent PCG64 generators split from one 64-bit seed."""
    return [np.random.Generator(np.random.PCG64(ss))
            for ss in np.random.SeedSequence(int(seed)).spawn(k)]


def _pair_terms(points):
    d = points[:, None, :] - points[None, :, :]
    r2 = (d * d).sum(-1)
    np.fill_diagonal(r2, np.inf)
    if not np.all(r2 > 0):
        raise InfiniteEnergyError("coincident points have infinite energy")
    return d, r2


def discrete_energy(points, s):
    """Riesz ``s``-energy of a point set, self-interactions removed."""
    points = np.asarray(points, float)
    _, r2 = _pair_terms(points)
    return float((r2 ** (-s / 2)).sum())


def energy_gradient(points, s):
    """``(E, dE/dx)`` with ``dE/dx_i = -2 s sum_j r_ij^(-s-2) (x_i - x_j)``."""
    d, r2 = _pair_terms(points)
    rs = r2 ** (-s / 2)
    g = -2 * s * np.einsum("ij,ijn->in", rs / r2, d)
    return float(rs.sum()), g


class _Chart:
    """Parameter-space (or, for spheres, ambient) coordinates of one component."""

    def __init__(self, spec, component):
        self.comp = spec.components[component]
        self.shape = self.comp.shape
        self.sphere = self.shape.kind == "sphere"
        if self.sphere and self.shape.frame is not None:
            raise ConfigurationError("sphere point optimization uses the unrotated chart")

    def random(self, rng, N):
        if self.sphere:
            v = rng.standard_normal((N, 3))
            return v / np.linalg.norm(v, axis=1, keepdims=True)
        return rng.uniform(0, 1, (N, self.shape.m)) * np.asarray(self.shape.periods)

    def embed(self, z):
        if self.sphere:
            return self.shape.R * z + self.comp.c
        return self.comp.embed(z)

    def pull(self, z, gx):
        """Descent coordinates gradient from the ambient gradient."""
        if self.sphere:
            # tangential projection
            return self.shape.R * (gx - (gx * z).sum(1, keepdims=True) * z)
        D1 = np.stack([self.shape.partial(z, tuple(e)) for e in np.eye(self.shape.m, dtype=int)],
                      axis=1)
        return np.einsum("kjn,kn->kj", D1, gx)

    def retract(self, z):
        if self.sphere:
            return z / np.linalg.norm(z, axis=1, keepdims=True)
        return np.mod(z, np.asarray(self.shape.periods))

    def params(self, z):
        if self.sphere:
            th = np.arccos(np.clip(z[:, 2], -1, 1))
            return np.stack([th, np.mod(np.arctan2(z[:, 1], z[:, 0]), 2 * np.pi)], 1)
        return z


def _descend(chart, z, s, max_iter, gtol):
    """Barzilai-Borwein steps safeguarded by Armijo backtracking (monotone)."""
    E, gx = energy_gradient(chart.embed(z), s)
    g = chart.pull(z, gx)
    t = 1.0 / max(np.abs(g).max(), 1e-300) * 1e-2
    it = stall = 0
    for it in range(1, max_iter + 1):
        gn2 = float((g * g).sum())
        if np.sqrt(gn2) <= gtol * E or stall >= 25:
            break
        while True:
            zn = chart.retract(z - t * g)
            try:
                En, gxn = energy_gradient(chart.embed(zn), s)
            except InfiniteEnergyError:
                En = np.inf
            if En <= E - 1e-4 * t * gn2:
                break
            t *= 0.5
            if t < 1e-300:
                return z, E, it
        gnew = chart.pull(zn, gxn)
        dz = zn - z
        if not chart.sphere:
            per = np.asarray(chart.shape.periods)
            dz = (dz + 0.5 * per) % per - 0.5 * per
        dg = gnew - g
        den = float((dz * dg).sum())
        t = float((dz * dz).sum()) / den if den > 0 else 2 * t
        # roundoff floor: stop after a run of negligible decreases
        stall = stall + 1 if E - En <= 1e-15 * E else 0
        z, E, g = zn, En, gnew
    return z, E, it


def _newton_polish(chart, z, s, steps=6, max_size=2000):
    """Newton steps on the gradient with a central-difference Hessian.

    The Hessian is singular along symmetry directions, so steps are
    least-squares solutions; a step is kept only if it lowers the gradient
    norm without raising the energy beyond roundoff.
    """
    if chart.sphere or z.size > max_size:
        return z

    def grad(zz):
        E, gx = energy_gradient(chart.embed(zz), s)
        return E, chart.pull(zz, gx).ravel()

    E, g = grad(z)
    h = 1e-6
    for _ in range(steps):
        H = np.empty((z.size, z.size))
        flat = z.ravel()
        for k in range(z.size):
            e = np.zeros(z.size)
            e[k] = h
            H[:, k] = (grad((flat + e).reshape(z.shape))[1]
                       - grad((flat - e).reshape(z.shape))[1]) / (2 * h)
        H = 0.5 * (H + H.T)
        step = linalg.lstsq(H, -g, cond=1e-10)[0]
        zn = chart.retract(z + step.reshape(z.shape))
        En, gn = grad(zn)
        if not (np.linalg.norm(gn) < np.linalg.norm(g) and En <= E * (1 + 1e-14)):
            break
        z, E, g = zn, En, gn
    return z


def optimize_points(spec, component, N, s, seed=0, restarts=4, max_iter=20000, gtol=1e-13,
                    threads=1, polish=True):
    """Best-found minimal ``s``-energy configuration of ``N`` points on one component.

    Each restart descends from an independent random start (PCG64 stream
    split from ``seed``) and is finished by a few Newton steps on curves and
    tori; the lowest energy wins, ties broken by restart index.
    """
    if N < 2:
        raise ValueError("need at least 2 points")
    m = spec.components[component].shape.m
    if not s > m:
        raise ValueError(f"Riesz exponent s={s} must exceed the dimension {m}")
    chart = _Chart(spec, component)
    rngs = rng_streams(seed, restarts)

    def run(k):
        z = chart.random(rngs[k], N)
        z, E, it = _descend(chart, z, s, max_iter, gtol)
        if polish:
            z = _newton_polish(chart, z, s)
            E = discrete_energy(chart.embed(z), s)
        return z, E, it

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, range(restarts)))
    else:
        results = [run(k) for k in range(restarts)]
    energies = [r[1] for r in results]
    best = int(np.argmin(energies))
    z, E, it = results[best]
    return PointConfiguration(chart.params(z), chart.embed(z), float(s), int(seed), float(E),
                              component, energies, it)


def equally_spaced_energy(N, s, R=1.0):
    """Energy of ``N`` equally spaced points on a circle of radius ``R``."""
    j = np.arange(1, N)
    return float(N * ((2 * R * np.sin(np.pi * j / N)) ** (-s)).sum())


def scaling_fit(spec, component, s, N_list, seed=0, restarts=4, configs=None):
    """Scaled energies ``E N^-(1+s/d)`` and their extrapolated limit.

    The limit is fitted as ``L + A N^(1 - s/d) + B N^-2``, the first
    correction terms of the equally spaced circle sum.
    """
    N_list = [int(n) for n in N_list]
    if len(N_list) < 4:
        raise ValueError("need at least 4 values of N")
    d = spec.components[component].shape.m
    rows, configs_out = [], []
    for i, N in enumerate(N_list):
        cfg = configs[i] if configs is not None else optimize_points(spec, component, N, s,
                                                                      seed, restarts)
        configs_out.append(cfg)
        gap = equidistribution_gap(spec, component, cfg.points)
        rows.append([N, s, cfg.energy, cfg.energy * N ** (-(1 + s / d)), gap, cfg.restart_spread,
                     seed])
    res = SweepResult(["N", "s", "energy", "scaled_energy", "gap", "restart_spread", "seed"], rows)
    Ns = np.asarray(N_list, float)
    y = res.column("scaled_energy")
    X = np.stack([np.ones_like(Ns), Ns ** (1 - s / d), Ns ** -2.0], 1)
    coef, *_ = linalg.lstsq(X, y)
    resid = y - X @ coef
    res.fits = dict(limit=float(coef[0]), A=float(coef[1]), B=float(coef[2]),
                    fit_rms=float(np.sqrt(np.mean(resid**2))))
    res.configs = configs_out
    return res


def test_bank(n, count=20):
    """Exponents of the ambient monomials used as equidistribution test functions."""
    exps = []
    deg = 1
    while len(exps) < count:
        for e in _compositions(deg, n):
            exps.append(e)
            if len(exps) == count:
                break
        deg += 1
    return np.array(exps)


test_bank.__test__ = False


def _compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for k in range(total, -1, -1):
        for rest in _compositions(total - k, parts - 1):
            yield (k,) + rest


def _monomials(points, center, scale, exps):
    y = (np.asarray(points) - center) / scale
    return np.prod(y[:, None, :] ** exps[None], axis=-1)


def equidistribution_gap(spec, component, points, grid_nodes=None):
    """Largest discrepancy between point averages and normalized surface averages.

    Test functions are the first 20 ambient monomials (degree 1 upward) in
    coordinates centered at the component center and scaled by its diameter.
    """
    comp = spec.components[component]
    sh = comp.shape
    exps = test_bank(sh.n)
    scale = sh.diameter()
    if grid_nodes is None:
        grid_nodes = 256 if sh.m == 1 else 64
    cg = Grid(ManifoldSpec([comp]), [grid_nodes]).components[0]
    ref = (cg.W[:, None] * _monomials(cg.points, comp.c, scale, exps)).sum(0) / cg.W.sum()
    avg = _monomials(points, comp.c, scale, exps).mean(0)
    return float(np.abs(avg - ref).max())

"""Gauss variational problems on grids: plain, L2-perturbed and punched.

All inner products are quadrature-weighted, ``(u, v) = sum W u v``.  Form
matrices ``A`` satisfy ``phi^T A phi = (V phi, phi)``; operators acting on
nodal values are ``W^-1 A``.

Densities are handled through their unsigned parts ``tau = alpha_l sigma`` on
each component: the cone is ``tau >= 0`` with ``(g_l, tau^l) = a^l``, the
quadratic form becomes ``D A D`` and the field ``D f`` with ``D = diag(alpha)``.
Reported densities are signed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import itertools

import numpy as np
from scipy import linalg

from .fpquad import NumericalError, assemble_P, assemble_punched

__all__ = ["GaussSpec", "MinimizerReport", "ExpansionResult", "SweepResult", "gauss_value",
           "punched_value", "sigma0_lambda0", "sigma1_lambda1", "solve_perturbed",
           "solve_gauss", "solve_punched", "expansion_check", "fit_slope", "epsilon_of_delta",
           "Problem", "cone_kkt", "enumerate_cone", "random_instance"]


def epsilon_of_delta(kernel, delta):
    """Coupling ``eps = beta c_m delta^beta``."""
    return kernel.beta * kernel.cm * delta**kernel.beta


@dataclass
class Problem:
    """Grid-free description of a constrained quadratic problem.

    ``W`` quadrature weights, ``slices`` node ranges of the components,
    ``signs`` the component signs.
    """
    W: np.ndarray
    slices: list
    signs: np.ndarray

    @classmethod
    def from_grid(cls, grid):
        return cls(grid.W.copy(), [c.sl for c in grid.components],
                   np.array([grid.spec.components[i].sign for i in range(len(grid.components))]))

    @property
    def N(self):
        return len(self.W)

    def sign_vector(self):
        d = np.empty(self.N)
        for sl, s in zip(self.slices, self.signs):
            d[sl] = s
        return d

    def constraint_matrix(self, g):
        """``C`` (K, N) with ``C tau = ((g_l, tau^l))_l``."""
        C = np.zeros((len(self.slices), self.N))
        for k, sl in enumerate(self.slices):
            C[k, sl] = self.W[sl] * g[sl]
        return C

    def ip(self, u, v):
        return float(np.sum(self.W * u * v))

    def l2(self, u):
        return float(np.sqrt(self.ip(u, u)))


@dataclass
class GaussSpec:
    f: np.ndarray
    g: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.f = np.asarray(self.f, float)
        self.g = np.asarray(self.g, float)
        self.a = np.atleast_1d(np.asarray(self.a, float))
        if np.any(self.g <= 0):
            raise ValueError("g must be strictly positive")
        if np.any(self.a <= 0):
            raise ValueError("constraint values a must be positive")


@dataclass
class MinimizerReport:
    sigma: np.ndarray
    lam: np.ndarray
    active: np.ndarray
    energy: float
    objective: float
    eps: float = None
    delta: float = None
    J_delta: float = None
    orientation: int = None
    iterations: int = 0
    feasibility: float = 0.0
    kkt_residual: float = 0.0
    path: str = "interior"
    reduced_min_eig: float = None
    is_minimizer: bool = True
    extra: dict = field(default_factory=dict)

    def summary(self):
        return dict(lam=self.lam.tolist(), active_count=int(self.active.sum()), energy=self.energy,
                    objective=self.objective, eps=self.eps, delta=self.delta, J_delta=self.J_delta,
                    orientation=self.orientation, iterations=self.iterations,
                    feasibility=self.feasibility, kkt_residual=self.kkt_residual, path=self.path,
                    reduced_min_eig=self.reduced_min_eig, is_minimizer=self.is_minimizer,
                    **self.extra)


@dataclass
class ExpansionResult:
    sigma0: np.ndarray
    lam0: np.ndarray
    sigma1: np.ndarray
    lam1: np.ndarray
    sigma2: np.ndarray = None
    lam2: np.ndarray = None
    eps: float = None
    delta: float = None
    norms: dict = field(default_factory=dict)


@dataclass
class SweepResult:
    columns: list
    rows: list
    fits: dict = field(default_factory=dict)

    def column(self, name):
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], float)


# ---------------------------------------------------------------------------
# values
# ---------------------------------------------------------------------------

def gauss_value(A, W, f, phi):
    """``phi^T A phi - 2 (f, phi)``."""
    phi = np.asarray(phi, float)
    return float(phi @ A @ phi - 2 * np.sum(W * f * phi))


def punched_value(grid, kernel, delta, f, phi, V=None, allow_subgrid=False, rtol=1e-8):
    """Punched functional evaluated directly and through the compensator identity.

    Returns a dict with ``direct``, ``decomposed`` (``(1/eps)||phi||^2 +
    (V phi, phi) - 2(f, phi) - P'(phi)``) and ``eps``; raises if the two
    disagree beyond ``rtol``.
    """
    W = grid.W
    P, Pp, Pn = assemble_P(grid, kernel, delta, V=V, allow_subgrid=allow_subgrid)
    Vm = P.A + Pn.A
    eps = epsilon_of_delta(kernel, delta)
    direct = gauss_value(Pn.A, W, f, phi)
    dec = (np.sum(W * phi * phi) / eps + phi @ Vm @ phi - 2 * np.sum(W * f * phi)
           - phi @ Pp.A @ phi)
    scale = max(1.0, abs(direct), np.sum(W * phi * phi) / eps)
    if abs(direct - dec) > rtol * scale:
        raise NumericalError(f"punched value mismatch: {direct} vs {dec}")
    return dict(direct=float(direct), decomposed=float(dec), eps=eps,
                compensator=float(phi @ Pp.A @ phi))


# ---------------------------------------------------------------------------
# expansion terms
# ---------------------------------------------------------------------------

def sigma0_lambda0(prob, g, a):
    """Leading terms: ``lambda0^k = a^k / (g_k, g_k)``, ``sigma0^k = g_k lambda0^k`` (signed)."""
    g = np.asarray(g, float)
    a = np.atleast_1d(np.asarray(a, float))
    if np.any(g <= 0):
        raise ValueError("g must be strictly positive")
    if np.any(a <= 0):
        raise ValueError("constraint values a must be positive")
    lam = np.empty(len(prob.slices))
    tau = np.empty(prob.N)
    for k, sl in enumerate(prob.slices):
        lam[k] = a[k] / float(np.sum(prob.W[sl] * g[sl] ** 2))
        tau[sl] = g[sl] * lam[k]
    return prob.sign_vector() * tau, lam


def sigma1_lambda1(prob, g, a, f, Aop):
    """First-order terms for ``sigma + eps Aop sigma - eps f = lambda g``.

    ``lambda1^k = (g_k, Aop sigma0 - f) / (g_k, g_k)`` and
    ``sigma1 = g lambda1 + f - Aop sigma0`` on each component, all in
    unsigned variables (``Aop`` acts on signed densities).
    """
    d = prob.sign_vector()
    s0, _ = sigma0_lambda0(prob, g, a)
    r = d * (Aop @ s0) - d * f              # unsigned residual  D(A sigma0 - f)
    lam = np.empty(len(prob.slices))
    tau = np.empty(prob.N)
    for k, sl in enumerate(prob.slices):
        gg = float(np.sum(prob.W[sl] * g[sl] ** 2))
        lam[k] = float(np.sum(prob.W[sl] * g[sl] * r[sl])) / gg
        tau[sl] = g[sl] * lam[k] - r[sl]
    return d * tau, lam


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

def _saddle(Q, rhs, C):
    """Solve ``[[Q, -C^T], [C, 0]] [x; lam] = [rhs; b]`` given ``rhs = (r, b)``."""
    r, b = rhs
    N, K = Q.shape[0], C.shape[0]
    M = np.zeros((N + K, N + K))
    M[:N, :N] = Q
    M[:N, N:] = -C.T
    M[N:, :N] = C
    sol = linalg.solve(M, np.concatenate([r, b]))
    return sol[:N], sol[N:]


def _reduced_min_eig(Q, C):
    """Smallest eigenvalue of ``Q`` on the null space of ``C``."""
    Z = linalg.null_space(C)
    if Z.size == 0:
        return np.inf
    H = Z.T @ Q @ Z
    return float(linalg.eigvalsh(0.5 * (H + H.T))[0])


def _project_simplex(y, wg, a):
    """Euclidean projection onto ``{x >= 0, wg . x = a}`` by bisection on the multiplier."""
    def mass(nu):
        return wg @ np.maximum(y - nu * wg, 0.0)
    lo = (np.min(y / wg) - a / (wg @ wg)) - 1.0
    hi = np.max(y / wg)
    while mass(lo) < a:
        lo -= 2 * (hi - lo) + 1
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mass(mid) > a:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-16 * max(1.0, abs(lo)):
            break
    x = np.maximum(y - 0.5 * (lo + hi) * wg, 0.0)
    # remove the residual bisection error along the free coordinates
    free = x > 0
    if free.any():
        x[free] += (a - wg @ x) * wg[free] / (wg[free] @ wg[free])
    return x


def cone_kkt(Q, c, C, b, x, tol=1e-8):
    """KKT data for ``min x^T Q x - 2 c^T x`` s.t. ``C x = b``, ``x >= 0``.

    Returns ``(lam, mu, residual)`` with ``2(Q x - c) = C^T lam' + mu`` scaled
    so that ``lam`` matches the equality multipliers of ``Q x - c = C^T lam + mu/2``.
    """
    grad = Q @ x - c
    free = x > tol * max(1.0, np.abs(x).max())
    Cf = C[:, free] if free.any() else C
    gf = grad[free] if free.any() else grad
    lam = linalg.lstsq(Cf.T, gf)[0]
    mu = grad - C.T @ lam
    res = max(float(np.abs(mu[free]).max()) if free.any() else 0.0,
              float(max(0.0, -mu[~free].min())) if (~free).any() else 0.0,
              float(np.abs(mu * x).max()))
    return lam, mu, res


def _active_set_polish(Q, c, C, b, x, max_iter=500, tol=1e-12):
    """Primal active-set iterations from a nearly optimal point."""
    N = len(x)
    act = x <= 1e-10 * max(1.0, x.max())
    for it in range(max_iter):
        free = ~act
        Qf = Q[np.ix_(free, free)]
        xf, lam = _saddle(Qf, (c[free], b), C[:, free])
        xn = np.zeros(N)
        xn[free] = xf
        if xf.min() < -tol * max(1.0, np.abs(xf).max()):
            # step from the current feasible point toward xn until a bound hits
            dx = xn - x
            neg = (dx < 0) & free
            t = np.min(np.where(neg, -x / np.where(neg, dx, -1.0), 1.0))
            t = min(max(t, 0.0), 1.0)
            x = np.maximum(x + t * dx, 0.0)
            blk = free & (x <= 1e-14 * max(1.0, x.max()))
            if not blk.any():
                blk = free & (xn <= xn[free].min())
            act |= blk
            continue
        x = xn
        mu = (Q @ x - c) - C.T @ lam
        if act.any() and mu[act].min() < -tol * max(1.0, np.abs(mu).max()):
            j = np.flatnonzero(act)[np.argmin(mu[act])]
            act[j] = False
            continue
        return x, lam, act, it + 1
    raise NumericalError("active-set polish did not converge")


def solve_gauss(A, prob, f, g, a, max_iter=20000, tol=1e-12, x0=None):
    """Minimize ``sigma^T A sigma - 2 (f, sigma)`` over the signed cone.

    ``A`` is the (oriented, possibly augmented) form matrix.  Accelerated
    projected gradient with exact weighted-simplex projections, followed by
    an equality-constrained active-set polish and a KKT check.
    """
    spec = GaussSpec(f, g, a)
    d = prob.sign_vector()
    Q = d[:, None] * A * d[None, :]
    Q = 0.5 * (Q + Q.T)
    c = d * prob.W * spec.f
    C = prob.constraint_matrix(spec.g)
    b = spec.a
    lmin = _reduced_min_eig(Q, C)
    if not lmin > 0:
        raise NumericalError(f"reduced Hessian not positive definite (min eigenvalue {lmin:.3g})")
    L = float(linalg.eigvalsh(Q, subset_by_index=[len(Q) - 1, len(Q) - 1])[0])
    step = 0.5 / L   # objective gradient is 2(Qx - c)

    def proj(y):
        out = np.empty_like(y)
        for k, sl in enumerate(prob.slices):
            out[sl] = _project_simplex(y[sl], C[k, sl], b[k])
        return out

    if x0 is None:
        x0 = np.concatenate([np.full(sl.stop - sl.start, b[k] / C[k, sl].sum())
                             for k, sl in enumerate(prob.slices)])
    x = proj(np.asarray(x0, float))
    y, t = x.copy(), 1.0
    it = 0
    for it in range(1, max_iter + 1):
        xn = proj(y - step * 2 * (Q @ y - c))
        tn = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = xn + (t - 1) / tn * (xn - x)
        if np.abs(xn - x).max() <= tol * max(1.0, np.abs(xn).max()):
            x = xn
            break
        # adaptive restart keeps the iteration monotone on ill-conditioned forms
        if (xn - x) @ (Q @ xn - c) > 0:
            y, tn = xn.copy(), 1.0
        x, t = xn, tn
    x, lam, act, pit = _active_set_polish(Q, c, C, b, x)
    lam_k, mu, res = cone_kkt(Q, c, C, b, x)
    sigma = d * x
    obj = float(x @ Q @ x - 2 * c @ x)
    return MinimizerReport(sigma=sigma, lam=lam, active=act, energy=float(sigma @ A @ sigma),
                           objective=obj, iterations=it + pit,
                           feasibility=float(np.abs(C @ x - b).max()), kkt_residual=res,
                           path="cone", reduced_min_eig=lmin,
                           extra=dict(mu_min=float(mu[act].min()) if act.any() else None))


def enumerate_cone(Q, c, C, b):
    """Reference solver: try every zero pattern of ``x`` (``2^N`` systems).

    Minimizes ``x^T Q x - 2 c^T x`` over ``{C x = b, x >= 0}``; only usable
    for tiny ``N``.  Returns the best feasible point.
    """
    N, K = Q.shape[0], C.shape[0]
    best, best_val = None, np.inf
    for zeros in itertools.product([False, True], repeat=N):
        free = ~np.array(zeros)
        if not free.any():
            continue
        try:
            xf, _ = _saddle(Q[np.ix_(free, free)], (c[free], b), C[:, free])
        except linalg.LinAlgError:
            continue
        x = np.zeros(N)
        x[free] = xf
        if x.min() < -1e-12 or np.abs(C @ x - b).max() > 1e-10:
            continue
        val = float(x @ Q @ x - 2 * c @ x)
        if val < best_val - 1e-14:
            best, best_val = x, val
    if best is None:
        raise NumericalError("no feasible active pattern")
    return best


def random_instance(rng, N=8, field_scale=1.0):
    """Random strictly convex single-component cone problem ``(A, Problem, f, g, a)``."""
    B = rng.standard_normal((N, N))
    A = B @ B.T / N + 0.1 * np.eye(N)
    W = rng.uniform(0.5, 1.5, N)
    f = field_scale * rng.standard_normal(N)
    g = rng.uniform(0.5, 2.0, N)
    a = np.array([rng.uniform(0.5, 2.0)])
    return A, Problem(W, [slice(0, N)], np.array([1])), f, g, a


def solve_perturbed(A, prob, f, g, a, eps, orientation=1):
    """L2-perturbed problem ``eps (A sigma, sigma) + ||sigma||^2 - 2 eps (f, sigma)``.

    ``A`` is the oriented form matrix.  KKT: ``sigma + eps A_op sigma - eps f
    = lambda g``.  The interior saddle solve is used unless it produces a
    negative unsigned density, in which case the cone solver takes over.
    """
    if eps < 0:
        raise ValueError("epsilon must be nonnegative")
    spec = GaussSpec(f, g, a)
    W = prob.W
    Q = np.diag(W) + eps * A
    # positivity of I + eps V on the grid
    crit = float(linalg.eigh(Q, np.diag(W), eigvals_only=True, subset_by_index=[0, 0])[0])
    if not crit > 0:
        raise NumericalError(f"epsilon too large for resolution: I + eps V has eigenvalue {crit:.4g}")
    d = prob.sign_vector()
    Qu = d[:, None] * Q * d[None, :]
    C = prob.constraint_matrix(spec.g)
    x, lam = _saddle(Qu, (eps * d * W * spec.f, spec.a), C)
    if x.min() >= 0:
        sigma = d * x
        res = float(np.abs(Qu @ x - eps * d * W * spec.f - C.T @ lam).max())
        return MinimizerReport(sigma=sigma, lam=lam, active=np.zeros(prob.N, bool),
                               energy=float(sigma @ A @ sigma),
                               objective=float(eps * (sigma @ A @ sigma) + np.sum(W * sigma**2)
                                               - 2 * eps * np.sum(W * spec.f * sigma)),
                               eps=eps, orientation=orientation,
                               feasibility=float(np.abs(C @ x - spec.a).max()),
                               kkt_residual=res, path="interior", reduced_min_eig=crit)
    rep = solve_gauss(Q, prob, eps * spec.f, spec.g, spec.a)
    rep.eps, rep.orientation = eps, orientation
    rep.energy = float(rep.sigma @ A @ rep.sigma)
    return rep


def solve_punched(grid, kernel, delta, f, g, a, allow_subgrid=False, Pn=None, V=None):
    """Stationary point of the punched functional on the constraint set.

    The punched form is indefinite at high frequencies (the truncated kernel
    loses the finite-part sign), so the KKT system is solved directly; the
    reduced-Hessian minimum eigenvalue is reported and ``is_minimizer``
    is set only when it is positive.  The multiplier is scaled to the
    ``sigma + eps A sigma - eps f = lambda g`` convention with
    ``eps = beta c_m delta^beta`` and ``A = W^-1 (A_V - P')``.
    """
    prob = Problem.from_grid(grid)
    spec = GaussSpec(f, g, a)
    if Pn is None:
        Pn = assemble_punched(grid, kernel, delta, allow_subgrid=allow_subgrid)
    eps = epsilon_of_delta(kernel, delta)
    W = prob.W
    d = prob.sign_vector()
    Q = eps * Pn.A
    Qu = d[:, None] * Q * d[None, :]
    C = prob.constraint_matrix(spec.g)
    x, lam = _saddle(Qu, (eps * d * W * spec.f, spec.a), C)
    rmin = _reduced_min_eig(Qu, C)
    sigma = d * x
    J = gauss_value(Pn.A, W, spec.f, sigma)
    res = float(np.abs(Qu @ x - eps * d * W * spec.f - C.T @ lam).max())
    return MinimizerReport(sigma=sigma, lam=lam, active=np.zeros(prob.N, bool),
                           energy=float(sigma @ Pn.A @ sigma), objective=J, eps=eps, delta=delta,
                           J_delta=J, feasibility=float(np.abs(C @ x - spec.a).max()),
                           kkt_residual=res, path="stationary", reduced_min_eig=rmin,
                           is_minimizer=bool(rmin > 0 and x.min() >= 0),
                           extra=dict(negative_nodes=int((x < 0).sum())))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def fit_slope(x, y, trim=0.1):
    """Least-squares slope of ``log y`` against ``log x`` over the inner part of the sweep."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    order = np.argsort(x)
    x, y = x[order], y[order]
    k = int(np.floor(trim * len(x)))
    xs, ys = x[k:len(x) - k], y[k:len(y) - k]
    p = np.polyfit(np.log(xs), np.log(ys), 1)
    return float(p[0])


def expansion_check(prob, A, f, g, a, eps_values, Aop_first=None, orientation=1):
    """Perturbed-problem sweep against ``sigma0 + eps sigma1``.

    ``A`` is the oriented form matrix.  Rows: ``(eps, ||s* - s0||,
    ||s* - s0 - eps s1||, H_eps norm of (s* - s0 - eps s1)/eps^2, lambda)``.
    """
    eps_values = np.asarray(eps_values, float)
    if len(eps_values) < 4:
        raise ValueError("fewer than 4 sweep points")
    Aop = A / prob.W[:, None] if Aop_first is None else Aop_first
    s0, l0 = sigma0_lambda0(prob, g, a)
    s1, l1 = sigma1_lambda1(prob, g, a, f, Aop)
    rows = []
    for eps in eps_values:
        rep = solve_perturbed(A, prob, f, g, a, eps, orientation)
        r0 = rep.sigma - s0
        r1 = r0 - eps * s1
        s2 = r1 / eps**2
        h2 = float(eps * (s2 @ A @ s2) + np.sum(prob.W * s2 * s2))
        rows.append([eps, prob.l2(r0), prob.l2(r1), float(np.sqrt(max(h2, 0.0))),
                     *rep.lam.tolist(), int(rep.active.sum())])
    cols = ["epsilon", "l2_dist_sigma0", "l2_dist_first_order", "hnorm_sigma2_implied"] + \
        [f"lambda_{k}" for k in range(len(prob.slices))] + ["active_count"]
    res = SweepResult(cols, rows)
    res.fits = dict(slope_first=fit_slope(eps_values, res.column("l2_dist_sigma0")),
                    slope_second=fit_slope(eps_values, res.column("l2_dist_first_order")))
    res.expansion = ExpansionResult(s0, l0, s1, l1)
    return res

"""Chord-distance polar coordinates on curves and surfaces.

A ray leaves the base point ``x0 = x(u0)`` in a unit tangent direction and is
parametrized by the chord length ``rho = |x(u) - x0|`` itself.  It solves

    du^l/ds = A F^l / (F . p),   p_k = x_{|k} . (x - x0),  F^l = g^{lk} p_k,

which is the gradient flow of ``A = |x - x0|`` normalized to unit speed in
``A``.  The removable singularity at ``s = 0`` is bridged with the quadratic
Taylor start ``u0 + s Theta - s^2/2 Gamma(Theta, Theta)``.

The rays double as the near-diagonal integration engine of :mod:`fpquad`
(:class:`PolarFan`) and as the numeric truth for the closed-form ray series.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import pi

import numpy as np
from scipy.integrate import solve_ivp

from .geometry import jets, rotation_to

__all__ = [
    "PolarRay", "ExpansionCoefficients", "PolarRule", "PolarFan", "ray_solve",
    "ray_expansion", "numeric_taylor", "jacobian_numeric", "polar_quadrature",
    "tangent_frame", "martensen_table",
]

# series start radius relative to the shape diameter
S0_FRACTION = 1e-8
# stop once |grad_Gamma A| drops below this
GRAD_FLOOR = 0.1
ODE_RTOL = 1e-12


def _first(shape, U):
    m = shape.m
    X = shape.partial(U, (0,) * m)
    eye = np.eye(m, dtype=int)
    D1 = np.stack([shape.partial(U, tuple(e)) for e in eye], axis=1)
    return X, D1


def _rhs(shape, U0, dU):
    """Ray velocity du/ds and |grad A| at ``U0 + dU`` (P, m) for base parameters U0."""
    U0 = np.broadcast_to(U0, dU.shape)
    _, D1 = _first(shape, U0 + dU)
    diff = chord_vector(shape, U0, dU)
    A = np.sqrt((diff * diff).sum(-1))
    p = np.einsum("pkn,pn->pk", D1, diff)
    g = np.einsum("pjn,pkn->pjk", D1, D1)
    F = np.linalg.solve(g, p[..., None])[..., 0]
    Fp = (F * p).sum(-1)
    return A[:, None] * F / Fp[:, None], np.sqrt(Fp) / A


_GL_T, _GL_W = np.polynomial.legendre.leggauss(16)
_GL_T, _GL_W = 0.5 * (_GL_T + 1), 0.5 * _GL_W


def chord_vector(shape, U0, dU):
    """``x(U0 + dU) - x(U0)`` without cancellation: ``int_0^1 D1(U0 + t dU) dU dt``.

    Subtracting embedded points loses ``eps/|dU|`` relative accuracy, which
    finite-part weights ``rho^(-1-beta)`` would amplify; the Gauss-Legendre
    line integral keeps full relative precision for small steps.
    """
    U0 = np.broadcast_to(U0, dU.shape)
    m = shape.m
    P = (U0[None] + _GL_T[:, None, None] * dU[None]).reshape(-1, m)
    _, D1 = _first(shape, P)
    D1 = D1.reshape((len(_GL_T),) + dU.shape + (shape.n,))
    return np.einsum("t,tpkn,pk->pn", _GL_W, D1, dU)


def tangent_frame(D1):
    """Orthonormal tangent frame by Gram-Schmidt of the coordinate tangents."""
    e1 = D1[..., 0, :] / np.linalg.norm(D1[..., 0, :], axis=-1, keepdims=True)
    if D1.shape[-2] == 1:
        return e1[..., None, :]
    t = D1[..., 1, :] - (D1[..., 1, :] * e1).sum(-1, keepdims=True) * e1
    e2 = t / np.linalg.norm(t, axis=-1, keepdims=True)
    return np.stack([e1, e2], axis=-2)


def _param_direction(D1, ginv, e):
    """Parameter components of the embedded tangent vector e."""
    return np.einsum("...lk,...kn,...n->...l", ginv, D1, e)


@dataclass
class PolarRay:
    component: int
    u0: np.ndarray
    theta: np.ndarray
    rho: np.ndarray
    u: np.ndarray
    jacobian: np.ndarray
    rho_max: float
    truncated: bool
    defect: float            # max |A(u(rho)) - rho| over the samples
    _sol: object = None

    def __call__(self, rho):
        return self._sol(rho)


@dataclass
class ExpansionCoefficients:
    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray
    a_joint_scale: float
    a_split_scale: float


def _shape_of(spec, component):
    comp = spec.components[component]
    return comp, comp.shape


def ray_solve(spec, component, u0, theta, rho_max, tol=1e-9, samples=None):
    """Integrate one chord-polar ray.

    Parameters
    ----------
    spec : ManifoldSpec
    component : int
    u0 : array_like, shape (m,)
        Base point parameters.
    theta : array_like, shape (m,)
        Direction in parameter components, unit in the metric at ``u0``.
    rho_max : float
        Requested radius; the ray is truncated (with a warning) where the
        chord coordinate degenerates.
    tol : float
        Allowed defect ``|A(u(rho)) - rho|`` at the returned samples.
    samples : array_like, optional
        Radii at which to tabulate; defaults to 64 points in (0, rho_max].
    """
    comp, sh = _shape_of(spec, component)
    u0 = np.atleast_1d(np.asarray(u0, float))
    theta = np.atleast_1d(np.asarray(theta, float))
    d = jets(sh, u0[None])
    if abs(theta @ d["g"][0] @ theta - 1) > 1e-10:
        raise ValueError("direction must be a unit vector in the metric at the base point")
    x0 = d["x"][0]
    c2 = -0.5 * np.einsum("ljk,j,k->l", d["Gam"][0], theta, theta)
    s0 = S0_FRACTION * sh.diameter()

    def series(s):
        s = np.asarray(s, float)[..., None]
        return u0 + s * theta + s * s * c2

    # the state is the displacement u - u0, so relative error control
    # scales with the distance travelled
    def f(s, y):
        v, _ = _rhs(sh, u0[None], y[None])
        return v[0]

    def stop(s, y):
        return _rhs(sh, u0[None], y[None])[1][0] - GRAD_FLOOR
    stop.terminal = True

    sol = solve_ivp(f, (s0, rho_max), series(s0) - u0, method="DOP853", rtol=ODE_RTOL,
                    atol=1e-18, first_step=s0, dense_output=True, events=stop)
    truncated = sol.status == 1
    rmax = float(sol.t[-1])
    if truncated:
        warnings.warn(f"ray truncated at rho={rmax:.6g}: chord coordinate degenerates")

    def evaluate(r):
        r = np.asarray(r, float)
        out = np.empty(r.shape + (sh.m,))
        lo = r < s0
        out[lo] = series(r[lo])
        if np.any(~lo):
            out[~lo] = u0 + sol.sol(r[~lo]).T
        return out

    if samples is None:
        samples = np.linspace(0, rmax, 65)[1:]
    rho = np.asarray(samples, float)
    if np.any(rho > rmax * (1 + 1e-12)):
        raise ValueError("sample radius beyond the valid ray")
    U = evaluate(rho)
    X = sh.partial(U, (0,) * sh.m)
    defect = float(np.abs(np.sqrt(((X - x0) ** 2).sum(-1)) - rho).max())
    if defect > tol:
        warnings.warn(f"ray defect {defect:.3g} exceeds tolerance {tol:.3g}")
    jac = np.array([jacobian_numeric(spec, component, u0, theta, r, _ray=evaluate) for r in rho]) \
        if sh.m == 1 else np.full(rho.shape, np.nan)
    return PolarRay(component, u0, theta, rho, U, jac, rmax, truncated, defect, evaluate)


def _direction_angle(D1, ginv, theta):
    fr = tangent_frame(D1)
    e = theta @ D1
    return np.arctan2(e @ fr[1], e @ fr[0])


def jacobian_numeric(spec, component, u0, theta, rho, h=1e-3, _ray=None):
    """Surface-measure density ``ds / (drho domega)`` at radius ``rho``.

    For curves this is ``|x_u| du/drho``; for surfaces the angular derivative
    comes from fourth-order differences of neighbouring rays.
    """
    comp, sh = _shape_of(spec, component)
    u0 = np.atleast_1d(np.asarray(u0, float))
    theta = np.atleast_1d(np.asarray(theta, float))
    d = jets(sh, u0[None])
    x0 = d["x"][0]
    if _ray is None:
        ray = ray_solve(spec, component, u0, theta, rho * (1 + 1e-9) + 1e-12, samples=[rho])
        if rho > ray.rho_max:
            raise ValueError("radius beyond the valid ray")
        _ray = ray
    u = np.atleast_2d(_ray(np.array([rho])))
    v, _ = _rhs(sh, u0[None], u - u0)
    _, D1u = _first(sh, u)
    if sh.m == 1:
        return float(np.linalg.norm(D1u[0, 0]) * abs(v[0, 0]))
    D10, g0 = d["D1"][0], d["g"][0]
    ginv = np.linalg.inv(g0)
    fr = tangent_frame(D10)
    om = _direction_angle(D10, ginv, theta)
    # neighbouring rays share one integration so their errors are correlated
    ang = om + h * np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    e = np.cos(ang)[:, None] * fr[0] + np.sin(ang)[:, None] * fr[1]
    th = e @ D10.T @ ginv.T
    c2 = -0.5 * np.einsum("ljk,qj,qk->ql", d["Gam"][0], th, th)
    s0 = S0_FRACTION * sh.diameter()
    sol = solve_ivp(lambda s, y: _rhs(sh, u0[None], y.reshape(5, 2))[0].ravel(), (s0, rho),
                    (s0 * th + s0 * s0 * c2).ravel(), method="DOP853",
                    rtol=ODE_RTOL, atol=1e-18, first_step=s0)
    Uw = u0 + sol.y[:, -1].reshape(5, 2)
    Y = sh.partial(Uw, (0, 0))
    dY = (Y[0] - 8 * Y[1] + 8 * Y[3] - Y[4]) / (12 * h)
    v, _ = _rhs(sh, u0[None], sol.y[:, -1].reshape(5, 2)[2:3])
    _, D1u = _first(sh, Uw[2:3])
    return float(np.linalg.norm(np.cross(v[0] @ D1u[0], dY)))


def ray_expansion(jet, theta):
    """Closed-form series coefficients of a polar ray from the local jet.

    Returns ``c1 = Theta``, ``c2 = -Gamma(Theta,Theta)/2``, the cubic
    coefficient and two groupings of the measure coefficient: the 3/4 factor
    applied to both ``L`` products (``a_joint_scale``) or to the first only
    (``a_split_scale``).
    """
    th = np.atleast_1d(np.asarray(theta, float))
    G, dG, L, Lm = jet.christoffel, jet.dchristoffel, jet.L, jet.Lmixed
    c1 = th.copy()
    c2 = -0.5 * np.einsum("ljk,j,k->l", G, th, th)
    LTT = th @ L @ th
    bracket = (0.5 * np.einsum("lj,km->ljkm", Lm, L)
               + 2 * np.einsum("ltj,tkm->ljkm", G, G)
               - np.einsum("lmjk->ljkm", dG))
    c3 = np.einsum("ljkm,j,k,m->l", bracket, th, th, th) / 6 + LTT**2 * th / 8
    LjT = Lm @ th                              # L^j_t Theta^t
    LLTT = th @ (L @ jet.ginv @ L) @ th        # L^l_m L_lk Theta^m Theta^k
    a_joint = float(np.sum(th * (0.75 * (LTT**2 + LjT * LTT) - th * LLTT)))
    a_split_scale = float(np.sum(th * (0.75 * LTT**2 + LjT * LTT - th * LLTT)))
    return ExpansionCoefficients(c1, c2, c3, a_joint, a_split_scale)


def numeric_taylor(spec, component, u0, theta, scale=None, degree=8):
    """Least-squares Taylor coefficients of the numeric ray and of J_pol/rho^(m-1).

    Returns ``(coef_u, coef_J)`` with ``coef_u[k-1]`` the rho^k vector
    coefficient (k = 1..degree) and ``coef_J[k]`` the rho^k coefficient.
    """
    comp, sh = _shape_of(spec, component)
    u0 = np.atleast_1d(np.asarray(u0, float))
    if scale is None:
        scale = 0.1 * sh.injectivity()
        if sh.kind == "sphere":
            # the (theta, phi) chart is singular at the poles, which bounds
            # the convergence radius of the ray series
            scale = min(scale, 0.1 * sh.R * min(u0[0], pi - u0[0]))
    theta = np.atleast_1d(np.asarray(theta, float))
    rho = scale * 0.5 * (1 - np.cos(np.linspace(0, pi, 40)[1:]))
    ray = ray_solve(spec, component, u0, theta, scale * 1.0001, samples=rho)
    V = np.stack([rho**k for k in range(1, degree + 1)], axis=1)
    cu = np.linalg.lstsq(V, ray.u - u0, rcond=None)[0]
    fan = PolarFan(spec, component, u0[None], scale * 1.0001, n_dirs=32)
    om = _direction_angle(jets(sh, u0[None])["D1"][0], None, theta) if sh.m == 2 else 0.0
    jt = fan.at(rho)["Jt"][:, 0]                    # (R, K)
    # resample to the requested direction by trigonometric interpolation
    K = jt.shape[1]
    c = np.fft.rfft(jt, axis=1) / K
    k = np.arange(c.shape[1])
    wts = np.where((k == 0) | (2 * k == K), 1.0, 2.0)
    if sh.m == 2:
        jdir = (wts * (c * np.exp(1j * k * om))).real.sum(1)
    else:
        jdir = jt[:, 0] if theta[0] > 0 else jt[:, 1]
    Vj = np.stack([rho**k for k in range(0, degree + 1)], axis=1)
    cj = np.linalg.lstsq(Vj, jdir, rcond=None)[0]
    return cu, cj


# ---------------------------------------------------------------------------
# polar fans: many rays at once for quadrature
# ---------------------------------------------------------------------------

class PolarFan:
    """Chord-polar coordinates around a batch of base points of one component.

    For curves the two rays (directions +/-) are found by Newton's method on
    ``A(u) = rho`` (which is the exact solution of the ray equation in one
    dimension).  For surfaces all rays of all base points are integrated as
    one vector ODE with dense output; the angular derivative of ``u`` needed
    by the Jacobian is taken spectrally across the uniformly spaced
    directions.  On the sphere a single canonical fan is rotated onto each
    base point.
    """

    def __init__(self, spec, component, U0, rho_max, n_dirs=32):
        comp, sh = _shape_of(spec, component)
        self.comp, self.shape = comp, sh
        self.m = sh.m
        self.U0 = np.atleast_2d(np.asarray(U0, float))
        self.B = len(self.U0)
        self.rho_max = float(rho_max)
        d = jets(sh, self.U0)
        self.X0 = d["x"]
        self.frames = tangent_frame(d["D1"])
        self.normals0 = d["n"]
        if self.m == 1:
            self.K = 2
            self.omega = np.array([0.0, pi])
            self.speed0 = np.linalg.norm(d["D1"][:, 0], axis=-1)
            return
        if n_dirs % 2:
            raise ValueError("number of directions must be even")
        self.K = n_dirs
        self.omega = 2 * pi * np.arange(n_dirs) / n_dirs
        if sh.kind == "sphere":
            # canonical base point (theta, phi) = (pi/2, 0) in an unrotated chart
            from .geometry import Sphere
            self._work = Sphere(sh.R)
            base = np.array([[0.5 * pi, 0.0]])
            dc = jets(self._work, base)
            frc = tangent_frame(dc["D1"])[0]
            canon = np.stack([dc["n"][0], frc[0], frc[1]])
            # _rot[b] maps canonical embedded vectors to the frame of base b
            self._rot = np.stack([np.stack([d["n"][b], self.frames[b, 0], self.frames[b, 1]], 1)
                                  @ canon for b in range(self.B)])
            self._solve(dc, base)
        else:
            self._work = sh
            self._rot = None
            self._solve(d, self.U0)

    # -- surfaces ----------------------------------------------------------
    def _solve(self, d, base):
        sh = self._work
        nb = len(base)
        K = self.K
        fr = tangent_frame(d["D1"])
        e = (np.cos(self.omega)[None, :, None] * fr[:, None, 0]
             + np.sin(self.omega)[None, :, None] * fr[:, None, 1])       # (nb, K, n)
        theta = _param_direction(d["D1"][:, None], d["ginv"][:, None], e)  # (nb, K, 2)
        c2 = -0.5 * np.einsum("bljk,bqj,bqk->bql", d["Gam"], theta, theta)
        self._theta, self._c2, self._base = theta, c2, base
        self._e = e
        X0 = np.repeat(d["x"], K, axis=0)
        s0 = S0_FRACTION * self.shape.diameter()
        self._s0 = s0
        y0 = (s0 * theta + s0 * s0 * c2).ravel()
        B0 = np.repeat(base, K, axis=0)

        def f(s, y):
            v, _ = _rhs(sh, B0, y.reshape(-1, 2))
            return v.ravel()

        def stop(s, y):
            return _rhs(sh, B0, y.reshape(-1, 2))[1].min() - GRAD_FLOOR
        stop.terminal = True
        sol = solve_ivp(f, (s0, self.rho_max), y0, method="DOP853", rtol=ODE_RTOL,
                        atol=1e-18, first_step=s0, dense_output=True, events=stop)
        if sol.status == 1:
            raise ValueError(f"polar radius {self.rho_max:.4g} exceeds the valid chord "
                             f"coordinate (degenerates at {sol.t[-1]:.4g})")
        if sol.status != 0:
            raise RuntimeError(f"ray integration failed: {sol.message}")
        self._sol = sol
        self._X0w = X0

    def _du_surface(self, rho):
        """Parameter displacement from the base point along every ray."""
        rho = np.asarray(rho, float)
        nb, K = self._theta.shape[:2]
        out = np.empty((len(rho), nb, K, 2))
        lo = rho < self._s0
        r = rho[lo][:, None, None, None]
        out[lo] = r * self._theta[None] + r * r * self._c2[None]
        if np.any(~lo):
            out[~lo] = self._sol.sol(rho[~lo]).T.reshape(-1, nb, K, 2)
        return out

    def _u_surface(self, rho):
        return self._base[None, :, None] + self._du_surface(rho)

    # -- curves ------------------------------------------------------------
    def _du_curve(self, rho):
        return self._u_curve(rho, displacement=True)

    def _u_curve(self, rho, displacement=False):
        sh = self.shape
        rho = np.asarray(rho, float)
        sgn = np.array([1.0, -1.0])
        t = rho[:, None, None] / self.speed0[None, :, None] * np.ones((1, 1, 2))
        u0 = self.U0[:, 0][None, :, None]
        X0 = self.X0[None, :, None]
        U0f = np.broadcast_to(u0, t.shape).reshape(-1, 1)
        for _ in range(60):
            u = u0 + sgn * t
            D = sh.partial(u.reshape(-1, 1), (1,)).reshape(u.shape + (2,))
            diff = chord_vector(sh, U0f, (sgn * t).reshape(-1, 1)).reshape(u.shape + (2,))
            fval = (diff * diff).sum(-1) - rho[:, None, None] ** 2
            fp = 2 * sgn * (diff * D).sum(-1)
            step = fval / np.where(fp > 0, fp, np.inf)
            t = t - step
            if np.abs(step).max() < 1e-15 * max(1.0, np.abs(t).max()):
                break
        return ((sgn * t) if displacement else (u0 + sgn * t))[..., None]

    def at(self, rho):
        """Polar data at radii ``rho``.

        Returns a dict with ``U`` (R,B,K,m) working-chart parameters, ``Y``
        (R,B,K,n) embedded points, ``Jt = J_pol / rho^(m-1)`` (R,B,K) and
        ``e`` (B,K,n) initial unit directions.
        """
        rho = np.atleast_1d(np.asarray(rho, float))
        if np.any(rho > self.rho_max * (1 + 1e-12)):
            raise ValueError("radius beyond the fan")
        R = len(rho)
        if self.m == 1:
            dU = self._du_curve(rho)
            U = self.U0[None, :, None] + dU
            flat = U.reshape(-1, 1)
            _, D1 = _first(self.shape, flat)
            U0f = np.broadcast_to(self.U0[None, :, None], U.shape).reshape(-1, 1)
            diff = chord_vector(self.shape, U0f, dU.reshape(-1, 1))
            A = np.sqrt((diff * diff).sum(-1))
            p = (diff * D1[:, 0]).sum(-1)
            sp = np.linalg.norm(D1[:, 0], axis=-1)
            # J~ - 1 = (|x_u| A - p) / p with |x_u| A - p = |x_u| A sin^2 / (1 + cos)
            # of the angle between chord and tangent, free of cancellation
            cr = np.abs(diff[:, 0] * D1[:, 0, 1] - diff[:, 1] * D1[:, 0, 0])
            with np.errstate(invalid="ignore", divide="ignore"):
                sn = cr / (A * sp)
                cs = np.abs(p) / (A * sp)
                Jm1 = np.where(A > 0, sp * A * sn**2 / (1 + cs) / np.abs(p), 0.0)
            Jm1 = Jm1.reshape(U.shape[:3])
            Jt = 1.0 + Jm1
            Dv = diff.reshape(U.shape[:3] + (2,))
            Y = Dv + self.X0[None, :, None] + self.comp.c
            e = np.stack([self.frames[:, 0], -self.frames[:, 0]], axis=1)
            return dict(U=U, dU=dU, Y=Y, D=Dv, Jt=Jt, Jm1=Jm1, e=e)
        dU = self._du_surface(rho)
        U = self._base[None, :, None] + dU
        nb, K = U.shape[1:3]
        flat = U.reshape(-1, 2)
        B0 = np.broadcast_to(self._base[None, :, None], U.shape).reshape(-1, 2)
        v, _ = _rhs(self._work, B0, dU.reshape(-1, 2))
        v = v.reshape(U.shape)
        _, D1 = _first(self._work, flat)
        Xr = chord_vector(self._work, B0, dU.reshape(-1, 2)).reshape(U.shape[:3] + (3,))
        # spectral angular derivative of the embedded level curves (chart free)
        k = np.fft.fftfreq(K, 1.0 / K)
        k[K // 2] = 0.0
        dY = np.fft.ifft(1j * k[None, None, :, None] * np.fft.fft(Xr, axis=2), axis=2).real
        dYr = np.einsum("pkn,pk->pn", D1, v.reshape(-1, 2)).reshape(dY.shape)
        Jpol = np.linalg.norm(np.cross(dYr, dY), axis=-1)
        r = np.where(rho > 0, rho, 1.0)[:, None, None]
        Jt = np.where(rho[:, None, None] > 0, Jpol / r, 1.0)
        Dv = Xr
        e = self._e
        if self._rot is not None:
            Dv = np.einsum("bnq,rkq->rbkn", self._rot, Dv[:, 0])
            e = np.einsum("bnq,kq->bkn", self._rot, self._e[0])
            U = np.broadcast_to(U[:, :1], (R, self.B, K, 2))
            dU = np.broadcast_to(dU[:, :1], (R, self.B, K, 2))
            Jt = np.broadcast_to(Jt[:, :1], (R, self.B, K))
        Y = Dv + self.X0[None, :, None] + self.comp.c
        return dict(U=U, dU=dU, Y=Y, D=Dv, Jt=Jt, Jm1=Jt - 1.0, e=e)


@dataclass
class PolarRule:
    rho: np.ndarray        # (Q,)
    omega: np.ndarray      # (Q,)
    points: np.ndarray     # (Q, n)
    params: np.ndarray     # (Q, m) (working chart)
    weights: np.ndarray    # (Q,) integrates f ds over {A <= rho_cut}

    def integrate(self, f):
        return float(np.dot(self.weights, f(self.points)))


def polar_quadrature(spec, component, u0, rho_cut, orders=(24, 32)):
    """Tensor rule over the chord disk ``{|x - x0| <= rho_cut}``.

    Gauss-Legendre in ``rho`` (times the polar Jacobian) and the trapezoidal
    rule in the direction angle (two directions on curves).
    """
    nr, nw = orders
    fan = PolarFan(spec, component, np.atleast_1d(np.asarray(u0, float))[None], rho_cut, n_dirs=nw)
    x, w = np.polynomial.legendre.leggauss(nr)
    rho = 0.5 * rho_cut * (x + 1)
    wr = 0.5 * rho_cut * w
    d = fan.at(rho)
    m = spec.m
    wa = 1.0 if m == 1 else 2 * pi / fan.K
    Wt = wr[:, None] * wa * d["Jt"][:, 0] * rho[:, None] ** (m - 1)
    K = fan.K
    return PolarRule(np.repeat(rho, K), np.tile(fan.omega, nr), d["Y"][:, 0].reshape(-1, spec.n),
                     d["U"][:, 0].reshape(-1, m), Wt.ravel())


def martensen_table(spec, component, u0, n_dirs=4, scale=None):
    """Closed-form series versus numeric-ray comparison rows.

    Each row: (order label, series value, numeric value, |difference|, asserted).
    Orders 1 and 2 are exact claims; order 3 and the measure coefficient are
    reported only.
    """
    from .geometry import jet as _jet
    comp, sh = _shape_of(spec, component)
    j = _jet(spec, component, u0)
    fr = tangent_frame(j.tangents[None])[0]
    rows = []
    angles = [0.0] if sh.m == 1 else list(np.linspace(0, pi, n_dirs, endpoint=False) + 0.3)
    for om in angles:
        e = fr[0] if sh.m == 1 else np.cos(om) * fr[0] + np.sin(om) * fr[1]
        th = j.ginv @ (j.tangents @ e)
        ex = ray_expansion(j, th)
        cu, cj = numeric_taylor(spec, component, u0, th, scale=scale)
        for order, pv, nv in ((1, ex.c1, cu[0]), (2, ex.c2, cu[1]), (3, ex.c3, cu[2])):
            for l in range(sh.m):
                rows.append(dict(theta=th.tolist(), order=f"u{order}[{l}]", series=float(pv[l]),
                                 numeric=float(nv[l]), abs_diff=float(abs(pv[l] - nv[l])),
                                 asserted=order <= 2))
        rows.append(dict(theta=th.tolist(), order="measure_joint_scale", series=ex.a_joint_scale,
                         numeric=float(cj[2]), abs_diff=abs(ex.a_joint_scale - cj[2]), asserted=False))
        rows.append(dict(theta=th.tolist(), order="measure_split_scale", series=ex.a_split_scale,
                         numeric=float(cj[2]), abs_diff=abs(ex.a_split_scale - cj[2]), asserted=False))
    return rows

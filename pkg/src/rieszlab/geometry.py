"""Closed parametric curves and surfaces with analytic differential-geometry jets.

Every shape is described by an embedding ``x(u)`` over a periodic (or, for the
sphere, latitude-longitude) parameter box.  All partial derivatives of the
embedding up to third order are analytic, and the metric, Christoffel symbols,
second fundamental form and their first parameter derivatives are derived
from them in one vectorized pass.

Conventions
-----------
* the unit normal points outward;
* ``x_{|j|k} = Gamma^l_{jk} x_{|l} + L_{jk} n`` (so convex shapes have
  negative definite ``L``);
* ``L_j^l = g^{lk} L_{kj}`` and ``n_{|j} = -L_j^l x_{|l}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import pi

import numpy as np

__all__ = [
    "Circle", "Ellipse", "Torus", "Sphere", "Component", "ManifoldSpec",
    "GeometryJet", "Grid", "ConfigurationError", "jet", "jets", "chord",
    "build_grid", "rotation_to",
]


class ConfigurationError(ValueError):
    """Invalid manifold / grid / kernel configuration."""


def _cosd(t, k):
    """k-th derivative of cos."""
    return np.cos(t + 0.5 * pi * k)


def _sind(t, k):
    return np.sin(t + 0.5 * pi * k)


def rotation_to(e):
    """Rotation matrix mapping (1, 0, 0) to the unit vector ``e``."""
    e = np.asarray(e, float)
    e = e / np.linalg.norm(e)
    a = np.array([1.0, 0.0, 0.0])
    v = np.cross(a, e)
    s = np.linalg.norm(v)
    c = float(a @ e)
    if s < 1e-14:
        return np.eye(3) if c > 0 else np.diag([-1.0, -1.0, 1.0])
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx * ((1 - c) / s**2)


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

class _Shape:
    kind = ""
    m = 1
    # parameter axis along which the shape (and its grid) is cyclically
    # symmetric, or None
    orbit_axis = None

    @property
    def n(self):
        return self.m + 1

    def partial(self, U, order):
        """Mixed partial derivative ``d^order x`` at parameters ``U``.

        ``U`` has shape (K, m); ``order`` is a tuple of m nonnegative ints.
        Returns (K, n).
        """
        raise NotImplementedError

    def derivatives(self, U):
        """Embedding and all partials up to order 3.

        Returns ``X (K,n)``, ``D1 (K,m,n)``, ``D2 (K,m,m,n)``, ``D3 (K,m,m,m,n)``.
        """
        U = np.atleast_2d(np.asarray(U, float))
        K, m = U.shape
        n = self.n
        X = self.partial(U, (0,) * m)
        D1 = np.empty((K, m, n))
        D2 = np.empty((K, m, m, n))
        D3 = np.empty((K, m, m, m, n))
        eye = np.eye(m, dtype=int)
        for j in range(m):
            D1[:, j] = self.partial(U, tuple(eye[j]))
            for k in range(j, m):
                D2[:, j, k] = D2[:, k, j] = self.partial(U, tuple(eye[j] + eye[k]))
                for l in range(k, m):
                    v = self.partial(U, tuple(eye[j] + eye[k] + eye[l]))
                    for p in {(j, k, l), (j, l, k), (k, j, l), (k, l, j), (l, j, k), (l, k, j)}:
                        D3[(slice(None),) + p] = v
        return X, D1, D2, D3

    def scaled(self, lam):
        raise NotImplementedError


@dataclass(frozen=True)
class Circle(_Shape):
    R: float = 1.0
    kind = "circle"
    m = 1
    orbit_axis = 0

    def __post_init__(self):
        if not self.R > 0:
            raise ConfigurationError("circle radius must be positive")

    @property
    def periods(self):
        return (2 * pi,)

    def partial(self, U, order):
        u = U[:, 0]
        k = order[0]
        return self.R * np.stack([_cosd(u, k), _sind(u, k)], axis=1)

    def area(self):
        return 2 * pi * self.R

    def diameter(self):
        return 2 * self.R

    def injectivity(self):
        return self.R

    def scaled(self, lam):
        return Circle(self.R * lam)


@dataclass(frozen=True)
class Ellipse(_Shape):
    a: float = 1.0
    b: float = 0.5
    kind = "ellipse"
    m = 1

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ConfigurationError("ellipse semi-axes must be positive")

    @property
    def periods(self):
        return (2 * pi,)

    def partial(self, U, order):
        u = U[:, 0]
        k = order[0]
        return np.stack([self.a * _cosd(u, k), self.b * _sind(u, k)], axis=1)

    def area(self):
        from scipy.special import ellipe
        a, b = max(self.a, self.b), min(self.a, self.b)
        return 4 * a * ellipe(1 - (b / a) ** 2)

    def diameter(self):
        return 2 * max(self.a, self.b)

    def injectivity(self):
        # smallest radius of curvature
        a, b = max(self.a, self.b), min(self.a, self.b)
        return b * b / a

    def scaled(self, lam):
        return Ellipse(self.a * lam, self.b * lam)


@dataclass(frozen=True)
class Torus(_Shape):
    R0: float = 2.0
    r: float = 0.5
    kind = "torus"
    m = 2
    orbit_axis = 0

    def __post_init__(self):
        if not (0 < self.r < self.R0):
            raise ConfigurationError("torus needs 0 < r < R0")

    @property
    def periods(self):
        return (2 * pi, 2 * pi)

    def partial(self, U, order):
        u, v = U[:, 0], U[:, 1]
        a, b = order
        P = self.r * _cosd(v, b) + (self.R0 if b == 0 else 0.0)
        z = self.r * _sind(v, b) if a == 0 else np.zeros_like(v)
        return np.stack([P * _cosd(u, a), P * _sind(u, a), z], axis=1)

    def area(self):
        return 4 * pi**2 * self.R0 * self.r

    def diameter(self):
        return 2 * (self.R0 + self.r)

    def injectivity(self):
        return self.r

    def scaled(self, lam):
        return Torus(self.R0 * lam, self.r * lam)


@dataclass(frozen=True)
class Sphere(_Shape):
    """Sphere in colatitude/longitude ``(theta, phi)``.

    ``frame`` rotates the chart; rotated copies are used so that local work
    never sits at a chart pole.
    """
    R: float = 1.0
    frame: tuple = None
    kind = "sphere"
    m = 2
    orbit_axis = 1

    def __post_init__(self):
        if not self.R > 0:
            raise ConfigurationError("sphere radius must be positive")

    @property
    def periods(self):
        return (pi, 2 * pi)

    def partial(self, U, order):
        th, ph = U[:, 0], U[:, 1]
        a, b = order
        s = _sind(th, a)
        z = _cosd(th, a) if b == 0 else np.zeros_like(th)
        out = self.R * np.stack([s * _cosd(ph, b), s * _sind(ph, b), z], axis=1)
        if self.frame is not None:
            out = out @ np.asarray(self.frame).T
        return out

    def area(self):
        return 4 * pi * self.R**2

    def diameter(self):
        return 2 * self.R

    def injectivity(self):
        return self.R

    def scaled(self, lam):
        return Sphere(self.R * lam, self.frame)

    def rotated(self, Q):
        """Same sphere with the chart rotated by ``Q``."""
        F = np.eye(3) if self.frame is None else np.asarray(self.frame)
        return Sphere(self.R, tuple(map(tuple, np.asarray(Q) @ F)))


SHAPES = {"circle": Circle, "ellipse": Ellipse, "torus": Torus, "sphere": Sphere}


@dataclass(frozen=True)
class Component:
    shape: _Shape
    center: tuple = None
    sign: int = 1

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ConfigurationError("component sign must be +1 or -1")
        c = np.zeros(self.shape.n) if self.center is None else np.asarray(self.center, float)
        if c.shape != (self.shape.n,):
            raise ConfigurationError(f"center must have {self.shape.n} coordinates")
        object.__setattr__(self, "center", tuple(c))

    @property
    def c(self):
        return np.asarray(self.center)

    def embed(self, U):
        return self.shape.partial(np.atleast_2d(U), (0,) * self.shape.m) + self.c


class ManifoldSpec:
    """Finite disjoint union of closed components, all of dimension ``m``."""

    def __init__(self, components):
        components = list(components)
        if not components:
            raise ConfigurationError("manifold needs at least one component")
        ms = {c.shape.m for c in components}
        if len(ms) != 1:
            raise ConfigurationError("all components must have the same dimension")
        self.components = components
        self.m = ms.pop()
        self.n = self.m + 1
        self._check_disjoint()

    def __len__(self):
        return len(self.components)

    def _sample(self, comp, k=96):
        sh = comp.shape
        axes = [np.linspace(0, p, k, endpoint=False) + 0.5 * p / k for p in sh.periods]
        U = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, sh.m)
        return comp.embed(U)

    def _check_disjoint(self):
        for i in range(len(self.components)):
            for j in range(i + 1, len(self.components)):
                if self._pair_distance(i, j) < 1e-6:
                    raise ConfigurationError(f"components {i} and {j} intersect")

    def _pair_distance(self, i, j, k=96):
        """Sampled closest distance refined by a local search in parameters."""
        from scipy.optimize import minimize
        ci, cj = self.components[i], self.components[j]
        axes = lambda c: [np.linspace(0, p, k, endpoint=False) + 0.5 * p / k
                          for p in c.shape.periods]
        Ui = np.stack(np.meshgrid(*axes(ci), indexing="ij"), -1).reshape(-1, self.m)
        Uj = np.stack(np.meshgrid(*axes(cj), indexing="ij"), -1).reshape(-1, self.m)
        D = ((ci.embed(Ui)[:, None] - cj.embed(Uj)[None]) ** 2).sum(-1)
        a, b = np.unravel_index(np.argmin(D), D.shape)
        f = lambda z: float(((ci.embed(z[:self.m]) - cj.embed(z[self.m:])) ** 2).sum())
        res = minimize(f, np.r_[Ui[a], Uj[b]], method="Nelder-Mead",
                       options=dict(xatol=1e-12, fatol=1e-20, maxiter=4000))
        return float(np.sqrt(min(res.fun, D[a, b])))

    def min_separation(self):
        """Smallest sampled distance between distinct components (inf if one)."""
        pts = [self._sample(c) for c in self.components]
        best = np.inf
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                best = min(best, np.sqrt(((pts[i][:, None] - pts[j][None]) ** 2).sum(-1)).min())
        return best

    def scaled(self, lam):
        return ManifoldSpec([Component(c.shape.scaled(lam), tuple(lam * c.c), c.sign)
                             for c in self.components])

    def describe(self):
        out = []
        for c in self.components:
            d = {"shape": c.shape.kind, "center": list(c.center), "sign": c.sign}
            d.update({k: v for k, v in vars(c.shape).items() if k != "frame"})
            out.append(d)
        return out


# ---------------------------------------------------------------------------
# jets
# ---------------------------------------------------------------------------

@dataclass
class GeometryJet:
    x: np.ndarray
    tangents: np.ndarray      # (m, n), row j = x_{|j}
    normal: np.ndarray
    g: np.ndarray
    ginv: np.ndarray
    J: float
    christoffel: np.ndarray   # [l, j, k] = Gamma^l_{jk}
    dchristoffel: np.ndarray  # [l, j, k, m] = d_m Gamma^l_{jk}
    L: np.ndarray             # [j, k]
    Lmixed: np.ndarray        # [l, j] = L_j^l
    dL: np.ndarray            # [j, k, l] = d_l L_{jk}
    second: np.ndarray = field(repr=False, default=None)  # x_{|j|k}


def _normal(D1):
    if D1.shape[1] == 1:
        t = D1[:, 0]
        nv = np.stack([t[:, 1], -t[:, 0]], axis=1)
    else:
        nv = np.cross(D1[:, 0], D1[:, 1])
    return nv / np.linalg.norm(nv, axis=1, keepdims=True)


def surface_data(shape, U):
    """Points, unit normals and area density from first derivatives only."""
    m = shape.m
    X = shape.partial(U, (0,) * m)
    D1 = np.stack([shape.partial(U, tuple(e)) for e in np.eye(m, dtype=int)], axis=1)
    g = np.einsum("kjn,kln->kjl", D1, D1)
    return dict(x=X, n=_normal(D1), J=np.sqrt(np.linalg.det(g)))


def jets(shape, U):
    """Vectorized differential geometry at parameter points ``U`` (K, m).

    Returns a dict of arrays with a leading batch axis.
    """
    X, D1, D2, D3 = shape.derivatives(U)
    g = np.einsum("kjn,kln->kjl", D1, D1)
    ginv = np.linalg.inv(g)
    J = np.sqrt(np.linalg.det(g))
    nrm = _normal(D1)
    p = np.einsum("kpn,kjln->kpjl", D1, D2)              # x_p . x_jk
    Gam = np.einsum("klp,kpjq->kljq", ginv, p)
    L = np.einsum("kjln,kn->kjl", D2, nrm)
    Lmix = np.einsum("klp,kpj->klj", ginv, L)
    # metric derivatives
    dg = np.einsum("kpmn,kqn->kpqm", D2, D1)
    dg = dg + dg.transpose(0, 2, 1, 3)
    dginv = -np.einsum("kap,kpqm,kqb->kabm", ginv, dg, ginv)
    dp = np.einsum("kpmn,kjln->kpjlm", D2, D2) + np.einsum("kpn,kjlmn->kpjlm", D1, D3)
    dGam = np.einsum("klpm,kpjq->kljqm", dginv, p) + np.einsum("klp,kpjqm->kljqm", ginv, dp)
    dn = -np.einsum("klm,kln->kmn", Lmix, D1)             # n_{|m}
    dL = np.einsum("kjlmn,kn->kjlm", D3, nrm) + np.einsum("kjln,kmn->kjlm", D2, dn)
    return dict(x=X, D1=D1, D2=D2, D3=D3, g=g, ginv=ginv, J=J, n=nrm, Gam=Gam,
                dGam=dGam, L=L, Lmix=Lmix, dL=dL)


def jet(spec, component, u):
    """Differential-geometry jet of component ``component`` at parameter ``u``."""
    comp = spec.components[component]
    sh = comp.shape
    if sh.kind not in SHAPES:
        raise ConfigurationError(f"unknown shape kind {sh.kind!r}")
    d = jets(sh, np.reshape(np.asarray(u, float), (1, sh.m)))
    return GeometryJet(
        x=d["x"][0] + comp.c, tangents=d["D1"][0], normal=d["n"][0], g=d["g"][0],
        ginv=d["ginv"][0], J=float(d["J"][0]), christoffel=d["Gam"][0],
        dchristoffel=d["dGam"][0], L=d["L"][0], Lmixed=d["Lmix"][0], dL=d["dL"][0],
        second=d["D2"][0],
    )


def chord(spec, components, u, v):
    """Euclidean distance between ``x(u)`` on one component and ``x(v)`` on another."""
    i, j = components
    a = spec.components[i].embed(np.reshape(np.asarray(u, float), (1, -1)))[0]
    b = spec.components[j].embed(np.reshape(np.asarray(v, float), (1, -1)))[0]
    return float(np.sqrt(((a - b) ** 2).sum()))


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

def _pow2(N):
    return N >= 1 and (N & (N - 1)) == 0


@dataclass
class ComponentGrid:
    index: int
    shape_counts: tuple          # nodes per parameter axis
    params: np.ndarray           # (Nc, m)
    points: np.ndarray           # (Nc, n)
    normals: np.ndarray
    w: np.ndarray
    J: np.ndarray
    offset: int                  # first global node index

    @property
    def size(self):
        return len(self.w)

    @property
    def W(self):
        return self.w * self.J

    @property
    def sl(self):
        return slice(self.offset, self.offset + self.size)


def _axis_nodes(shape, axis, N):
    """Nodes and weights along one parameter axis."""
    if shape.kind == "sphere" and axis == 0:
        # Gauss-Legendre in cos(theta): the sin(theta) pole factor is
        # absorbed analytically into the weight
        t, wt = np.polynomial.legendre.leggauss(N)
        th = np.arccos(t[::-1])
        return th, wt[::-1] / np.sin(th)
    p = shape.periods[axis]
    return np.arange(N) * (p / N), np.full(N, p / N)


class Grid:
    """Tensor quadrature grid over every component of a manifold."""

    def __init__(self, spec, counts):
        self.spec = spec
        comps = []
        off = 0
        for idx, (comp, N) in enumerate(zip(spec.components, counts)):
            sh = comp.shape
            N = (N,) * sh.m if np.isscalar(N) else tuple(N)
            if len(N) != sh.m:
                raise ConfigurationError("node counts must match the parameter dimension")
            for k in N:
                if k < 16 or not _pow2(k):
                    raise ConfigurationError(f"node count {k} must be a power of two >= 16")
            ax = [_axis_nodes(sh, a, k) for a, k in enumerate(N)]
            P = np.stack(np.meshgrid(*[a[0] for a in ax], indexing="ij"), -1).reshape(-1, sh.m)
            w = np.prod(np.stack(np.meshgrid(*[a[1] for a in ax], indexing="ij"), -1), -1).ravel()
            d = surface_data(sh, P)
            comps.append(ComponentGrid(idx, N, P, d["x"] + comp.c, d["n"], w, d["J"], off))
            off += len(w)
        self.components = comps
        self.size = off
        self.points = np.concatenate([c.points for c in comps])
        self.normals = np.concatenate([c.normals for c in comps])
        self.W = np.concatenate([c.W for c in comps])
        self.comp_index = np.concatenate([np.full(c.size, c.index) for c in comps])
        self.signs = np.array([spec.components[i].sign for i in self.comp_index])
        self.h_grid = self._spacing(max)
        self.h_min = self._spacing(min)

    def _spacing(self, red):
        vals = []
        for c in self.components:
            X = c.points.reshape(c.shape_counts + (-1,))
            for a in range(len(c.shape_counts)):
                d = np.sqrt(((np.roll(X, -1, axis=a) - X) ** 2).sum(-1))
                if self.spec.components[c.index].shape.kind == "sphere" and a == 0:
                    d = np.take(d, range(c.shape_counts[0] - 1), axis=0)
                vals.append(d.max() if red is max else d.min())
        return float(red(vals))

    def bandwidth(self, ci):
        """Highest resolved spatial frequency (per unit length) on a component."""
        c = self.components[ci]
        sh = self.spec.components[ci].shape
        if sh.kind == "circle":
            return c.shape_counts[0] / 2 / sh.R
        if sh.kind == "ellipse":
            return c.shape_counts[0] / 2 / min(sh.a, sh.b)
        if sh.kind == "torus":
            return max(c.shape_counts[0] / 2 / (sh.R0 - sh.r), c.shape_counts[1] / 2 / sh.r)
        return sphere_degree(c.shape_counts) / sh.R

    def integrate(self, values):
        return float(np.dot(self.W, values))

    def component_area(self, ci):
        return float(self.components[ci].W.sum())


def sphere_degree(counts):
    """Spherical-harmonic degree resolved by a (theta, phi) grid."""
    return min(counts[0] - 1, counts[1] // 2 - 1)


def build_grid(spec, N):
    """Uniform periodic grid with ``N`` nodes per axis (scalar or per component)."""
    if np.isscalar(N):
        N = [N] * len(spec)
    return Grid(spec, N)

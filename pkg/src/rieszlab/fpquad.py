"""Finite-part Riesz operators, punched kernels and their compensators.

The raw operator is

    (V phi)(x) = fp int |x - y|^(-m-beta) phi(y) ds_y
               = pv int k (phi(y) - phi(x)) ds_y + h(x) phi(x)

on an m-dimensional closed manifold in R^(m+1), with ``beta = 1 - alpha``.

Nystrom rows are built from three pieces:

* a chord-polar near field ``|y - x| <= c`` (rays from :mod:`martensen`),
  where grid values are carried to the polar nodes by band-limited
  interpolation and the radial finite part is taken with an exact moment
  after subtracting ``phi(x)`` (Gauss-Jacobi with weight ``rho^(1-beta)``);
* a smooth cutoff ``chi`` (1 on ``[0, c/2]``, 0 beyond ``c``) splitting the
  near field from the far field;
* a far field ``(1 - chi) k`` by the trapezoidal rule on an upsampled grid.

Because the angular sum over directions is taken before the radial
integration, the odd first-order terms cancel exactly and the radial
integrand after subtracting ``phi(x)`` is ``O(rho^(1-beta))``.
"""
from __future__ import annotations

import dataclasses
import struct
import warnings
from dataclasses import dataclass
from math import pi

import numpy as np
from scipy import integrate, special

from .geometry import ConfigurationError, Grid, ManifoldSpec, jets, sphere_degree
from .martensen import PolarFan

__all__ = [
    "KernelSpec", "OperatorMatrix", "SymbolInfo", "symbol_constant", "symbol_info",
    "fp_radial_moment", "sphere_measure", "c_m", "cutoff", "h_scalar", "h_vector",
    "h_terms", "assemble_V", "assemble_punched", "assemble_P", "compensator_gradient",
    "assemble_D", "circle_eigenvalue", "NumericalError",
]


class NumericalError(RuntimeError):
    """Indefinite system, non-convergence or similar numeric failure."""


def sphere_measure(m):
    """|S^(m-1)|: 2 for curves, 2 pi for surfaces."""
    return {1: 2.0, 2: 2 * pi}[m]


def c_m(m):
    return 1.0 / sphere_measure(m)


@dataclass(frozen=True)
class KernelSpec:
    """Riesz kernel ``|x-y|^(alpha-n)`` with splitting radius ``c``.

    ``kind`` is ``"riesz"`` or ``"laplace_hypersingular"`` (the alpha = 0
    double-layer normal derivative kernel on surfaces in R^3).
    """
    alpha: float
    n: int
    c: float
    orientation: int = 1
    kind: str = "riesz"

    def __post_init__(self):
        if not -1 < self.alpha < 1:
            raise ConfigurationError("alpha must lie in (-1, 1)")
        if self.n not in (2, 3):
            raise ConfigurationError("ambient dimension must be 2 or 3")
        if not self.c > 0:
            raise ConfigurationError("splitting radius must be positive")
        if self.orientation not in (1, -1):
            raise ConfigurationError("orientation must be +1 or -1")
        if self.kind not in ("riesz", "laplace_hypersingular"):
            raise ConfigurationError(f"unknown kernel kind {self.kind!r}")

    @property
    def beta(self):
        return 1.0 - self.alpha

    @property
    def m(self):
        return self.n - 1

    @property
    def cm(self):
        return c_m(self.m)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def describe(self):
        return dict(alpha=self.alpha, beta=self.beta, n=self.n, m=self.m, c_m=self.cm,
                    c=self.c, orientation=self.orientation, kind=self.kind)


def symbol_constant(n, beta):
    """Principal-symbol constant ``C(n-1, beta)``.

    ``2^-beta pi^((n-1)/2) Gamma(-beta/2) / Gamma((n - 1 + beta)/2)``; negative
    for every beta in (0, 2).
    """
    if not 0 < beta < 2:
        raise ValueError("beta must lie in (0, 2)")
    alpha = 1 - beta
    return float(2.0**-beta * pi ** ((n - 1) / 2) * special.gamma(-beta / 2)
                 / special.gamma((n - alpha) / 2))


@dataclass
class SymbolInfo:
    constant: float
    beta: float
    n: int

    def predicted(self, k):
        return self.constant * np.abs(np.asarray(k, float)) ** self.beta


def symbol_info(n, beta):
    return SymbolInfo(symbol_constant(n, beta), beta, n)


def circle_eigenvalue(k, beta):
    """Exact finite-part eigenvalue of V on the unit circle for mode ``e^{ik t}``.

    Analytic continuation in ``s = 1 + beta`` of
    ``int_0^{2pi} (2 sin(t/2))^-s e^{ikt} dt = 2 pi (-1)^k Gamma(1-s) /
    (Gamma(1 - s/2 + k) Gamma(1 - s/2 - k))``; for ``beta = 1`` it is
    ``-pi |k|``.
    """
    k = abs(int(k))
    s = 1 + beta
    if abs(beta - 1) < 1e-14:
        return -pi * k
    # reflection turns 1/Gamma(1 - s/2 - k) into Gamma(s/2 + k) sin(pi(1 - s/2 - k))/pi;
    # the (-1)^k factors cancel and the Gamma ratio is taken in logs
    ratio = (special.gammasgn(1 - s / 2 + k)
             * np.exp(special.gammaln(s / 2 + k) - special.gammaln(1 - s / 2 + k)))
    return float(2 * special.gamma(1 - s) * np.sin(pi * (1 - s / 2)) * ratio)


def fp_radial_moment(beta, delta, k):
    """Finite part of ``int_0^delta r^(k - beta - 1) dr`` = ``delta^(k-beta)/(k-beta)``."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    if abs(k - beta) < 1e-14:
        raise ValueError("log finite part: moment order equals beta")
    return delta ** (k - beta) / (k - beta)


def _psi(t):
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)


def cutoff(rho, c, start=None):
    """C-infinity cutoff: 1 on ``[0, start]`` (default ``c/2``), decreasing to 0 at ``c``."""
    start = 0.5 * c if start is None else start
    t = np.clip((np.asarray(rho, float) - start) / (c - start), 0.0, 1.0)
    a, b = _psi(t), _psi(1 - t)
    return b / (a + b)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def _kernel(kernel, X, Y, NX=None, NY=None):
    """Kernel values for broadcastable point arrays (last axis = coordinates)."""
    d = Y - X
    r2 = (d * d).sum(-1)
    if kernel.kind == "riesz":
        return r2 ** (-(kernel.m + kernel.beta) / 2)
    n = kernel.n
    cn = 1.0 / (2 * (n - 1) * pi)
    r = np.sqrt(r2)
    return cn * ((NX * NY).sum(-1) / r**n
                 + n * (d * NY).sum(-1) * (-d * NX).sum(-1) / r ** (n + 2))


def _kappa0(kernel):
    """Limit of ``rho^(m+beta) k`` at the diagonal."""
    return 1.0 if kernel.kind == "riesz" else 1.0 / (2 * (kernel.n - 1) * pi)


# ---------------------------------------------------------------------------
# band-limited interpolation from grid values
# ---------------------------------------------------------------------------

def dirichlet(t, N):
    """Periodic band-limited interpolation weight for N equispaced nodes."""
    t = np.asarray(t, float)
    # wrap only where needed: shifting by pi would cost absolute precision
    # in tiny offsets, which finite-part weights amplify
    far = np.abs(t) > pi
    if np.any(far):
        t = np.where(far, np.mod(t + pi, 2 * pi) - pi, t)
    small = np.abs(t) < 1e-13
    ts = np.where(small, 1.0, t)
    out = np.sin(0.5 * N * ts) / (N * np.tan(0.5 * ts))
    return np.where(small, 1.0, out)


def dirichlet_offset(off, d, N):
    """Dirichlet weight at ``t = off * 2 pi / N + d`` for integer node offsets.

    The numerator uses ``sin(N t / 2) = (-1)^off sin(N d / 2)`` exactly, so
    symmetric displacements ``+-d`` cancel to rounding in ``d`` rather than
    in the node positions.
    """
    off = np.asarray(off)
    sgn = 1.0 - 2.0 * (np.mod(off, 2))
    num = sgn * np.sin(0.5 * N * d)
    den = N * np.tan(0.5 * (off * (2 * pi / N) + d))
    zero = (np.mod(off, N) == 0) & (d == 0)
    return np.where(zero, 1.0, num / np.where(zero, 1.0, den))


def dirichlet_m1(d, N):
    """``E_0(d) - 1`` for the Dirichlet weight at the own node, as a sum of squares.

    ``E_0(d) = (1 + 2 sum_{k<N/2} cos(k d) + cos(N d / 2)) / N``.
    """
    k = np.arange(1, N // 2)
    d = np.asarray(d, float)
    acc = (np.sin(0.5 * d[..., None] * k) ** 2).sum(-1) if d.size * len(k) < 5e7 else \
        sum(np.sin(0.5 * d * kk) ** 2 for kk in k)
    return -(4 * acc + 2 * np.sin(0.25 * N * d) ** 2) / N


def real_sph_harm(L, theta, phi):
    """Orthonormal real spherical harmonics up to degree L, stacked on the last axis."""
    out = []
    for l in range(L + 1):
        for mm in range(-l, l + 1):
            Y = special.sph_harm_y(l, abs(mm), theta, phi)
            if mm > 0:
                out.append(np.sqrt(2) * (-1) ** mm * Y.real)
            elif mm < 0:
                out.append(np.sqrt(2) * (-1) ** mm * Y.imag)
            else:
                out.append(Y.real)
    return np.stack(out, axis=-1)


def _sph_angles(P, center, R):
    v = (P - center) / R
    th = np.arccos(np.clip(v[..., 2], -1, 1))
    ph = np.arctan2(v[..., 1], v[..., 0])
    return th, ph


class _ComponentData:
    """Interpolation and upsampled far-field quadrature for one component."""

    def __init__(self, grid, ci, width):
        self.grid = grid
        self.ci = ci
        cg = grid.components[ci]
        self.cg = cg
        self.comp = grid.spec.components[ci]
        self.shape = self.comp.shape
        self.counts = cg.shape_counts
        self.m = self.shape.m
        self.kind = self.shape.kind
        if self.kind == "sphere":
            if self.shape.frame is not None:
                raise ConfigurationError("sphere grids must use the unrotated chart")
            self.L = sphere_degree(self.counts)
            th, ph = _sph_angles(cg.points, self.comp.c, self.shape.R)
            Yg = real_sph_harm(self.L, th, ph)
            self.proj = (Yg * (cg.W / self.shape.R**2)[:, None]).T
        self._fine(width)

    # -- interpolation -----------------------------------------------------
    def interp_rows(self, nodes, dU, Y, q, sub=None):
        """``sum_q q (E(point_q) - sub_q e_node)`` for batches -> (B, Nc).

        ``nodes`` (B,) base node indices, ``dU`` (B,Q,m) parameter
        displacements from the base, ``Y`` (B,Q,n) embedded points, ``q``
        (B,Q) weights, ``sub`` (B,Q) flags for subtracting the base value.
        On periodic charts the subtraction is done inside the interpolation
        weights so that it costs no accuracy at tiny displacements.
        """
        sub = np.zeros(q.shape, bool) if sub is None else sub
        B = len(q)
        if self.kind == "sphere":
            th, ph = _sph_angles(Y, self.comp.c, self.shape.R)
            S = real_sph_harm(self.L, th, ph)
            rows = np.einsum("bq,bqs->bs", q, S) @ self.proj
            rows[np.arange(B), nodes] -= (q * sub).sum(1)
            return rows
        idx = np.unravel_index(nodes, self.counts)

        def lag(a):
            """Weights and their 'minus delta' variant along axis a."""
            N = self.counts[a]
            off = idx[a][:, None] - np.arange(N)[None]                  # (B, N)
            d = dU[..., a][..., None]
            E = dirichlet_offset(off[:, None, :], d, N)
            hit = (off == 0)[:, None, :]
            Em = np.where(hit, dirichlet_m1(d, N), E)
            return E, Em, hit
        if self.m == 1:
            E, Em, _ = lag(0)
            return np.einsum("bq,bqi->bi", q * ~sub, E) + np.einsum("bq,bqi->bi", q * sub, Em)
        (Eu, Emu, hu), (Ev, Emv, _) = lag(0), lag(1)
        qs = q * sub
        rows = np.einsum("bq,bqi,bqj->bij", q * ~sub, Eu, Ev)
        rows += np.einsum("bq,bqi,bqj->bij", qs, Emu, Ev)
        # e_node = delta_u delta_v: (Eu - du) Ev + du (Ev - dv)
        rows[np.arange(B), idx[0]] += np.einsum("bq,bqj->bj", qs, Emv)
        return rows.reshape(B, -1)

    # -- far field ---------------------------------------------------------
    def _fine(self, width):
        """Upsampled quadrature so the far-field cutoff transition (``width`` long) is resolved."""
        sh, counts = self.shape, self.counts
        # (1 - chi) k has a C-infinity but steep transition; curves are cheap
        # enough to resolve it to ~1e-10, surfaces to ~1e-4
        target = width / (64.0 if self.m == 1 else 8.0)
        if self.kind == "sphere":
            f = 1
            while pi * sh.R / (counts[0] * f) > target:
                f *= 2
            nf = (counts[0] * f, counts[1] * f)
        else:
            X = self.cg.points.reshape(counts + (-1,))
            nf = []
            for a, N in enumerate(counts):
                h = np.sqrt(((np.roll(X, -1, axis=a) - X) ** 2).sum(-1)).max()
                f = 1
                while h / f > target:
                    f *= 2
                nf.append(N * f)
            nf = tuple(nf)
        self.fine_counts = nf
        if nf == tuple(counts):
            self.fine = None
            self.fpoints, self.fnormals, self.fW = self.cg.points, self.cg.normals, self.cg.W
            return
        fg = Grid(ManifoldSpec([self.comp]), [nf]).components[0]
        self.fpoints, self.fnormals, self.fW = fg.points, fg.normals, fg.W
        if self.kind == "sphere":
            th, ph = _sph_angles(fg.points, self.comp.c, sh.R)
            self.fine = ("dense", real_sph_harm(self.L, th, ph) @ self.proj)
        else:
            mats = []
            for N, M in zip(counts, nf):
                uf = np.arange(M) * (2 * pi / M)
                mats.append(dirichlet(uf[:, None] - np.arange(N) * (2 * pi / N), N))
            self.fine = ("tensor", mats)

    def far_to_coarse(self, rows):
        """Map rows over fine points (B, Nf) to rows over grid nodes (B, Nc)."""
        if self.fine is None:
            return rows
        kind, P = self.fine
        if kind == "dense":
            return rows @ P
        if self.m == 1:
            return rows @ P[0]
        Pu, Pv = P
        R = rows.reshape(len(rows), Pu.shape[0], Pv.shape[0])
        return np.einsum("bij,ix,jy->bxy", R, Pu, Pv).reshape(len(rows), -1)

    # -- gradient ------------------------------------------------------------
    def gradient_rows(self, nodes, vec):
        """Rows r_i with ``r_i . phi = vec_i . grad_Gamma phi(x_i)`` (spectral)."""
        if self.kind == "sphere":
            raise NumericalError("gradient data unavailable on sphere grids (beta > 1 branch)")
        d = jets(self.shape, self.cg.params[nodes])
        coef = np.einsum("bjk,bkn,bn->bj", d["ginv"], d["D1"], vec)   # (B, m)
        out = np.zeros((len(nodes), self.cg.size))
        for a, N in enumerate(self.counts):
            k = np.fft.fftfreq(N, 1.0 / N)
            k[N // 2] = 0 if N % 2 == 0 else k[N // 2]
            # derivative matrix along axis a (first column of a circulant)
            e = np.zeros(N)
            e[0] = 1
            col = np.fft.ifft(1j * k * np.fft.fft(e)).real
            Dm = np.stack([np.roll(col, j) for j in range(N)], axis=1)   # Dm[i, j]
            idx = np.unravel_index(nodes, self.counts)
            for b in range(len(nodes)):
                row = np.zeros(self.counts)
                sl = [idx[t][b] for t in range(self.m)]
                sl[a] = slice(None)
                # derivative at node along axis a picks row idx[a] of Dm
                line = Dm[idx[a][b]]
                tmp = np.zeros(self.counts)
                tmp[tuple(sl)] = line
                out[b] += coef[b, a] * tmp.ravel()
        return out


def _gauss_jacobi(n, b, lo, hi):
    """Nodes/weights for ``int_lo^hi (rho - lo)^b f(rho) drho`` (lo must be 0 here)."""
    x, w = special.roots_jacobi(n, 0.0, b)
    L = hi - lo
    return lo + 0.5 * L * (x + 1), w * (0.5 * L) ** (1 + b)


def _gauss_legendre(n, lo, hi):
    x, w = np.polynomial.legendre.leggauss(n)
    return lo + 0.5 * (hi - lo) * (x + 1), 0.5 * (hi - lo) * w


# ---------------------------------------------------------------------------
# operator container
# ---------------------------------------------------------------------------

VARIANTS = ("fp_full", "punched", "compensator", "compensator_prime", "hypersingular_D",
            "compensator_gradient")
# largest delta/c for which the punched cut is integrated in the near field
PUNCHED_SHIFT_LIMIT = 0.75

_MAGIC = b"RZLB"
_HEADER = struct.Struct("<4sIQ24sdd")


@dataclass
class OperatorMatrix:
    """Quadrature-weighted quadratic form ``phi^T A phi`` on grid nodal values.

    ``A = diag(W) K`` where ``K`` is the Nystrom operator on nodal values; it
    is symmetrized and the relative asymmetry before symmetrization is kept.
    """
    A: np.ndarray
    W: np.ndarray
    kernel: KernelSpec
    variant: str
    delta: float = None
    asymmetry: float = 0.0
    h: np.ndarray = None
    meta: dict = dataclasses.field(default_factory=dict)

    @property
    def N(self):
        return len(self.W)

    @property
    def operator(self):
        """Action on nodal values: ``K = W^-1 A``."""
        return self.A / self.W[:, None]

    def form(self, phi, psi=None):
        psi = phi if psi is None else psi
        return float(np.asarray(phi) @ self.A @ np.asarray(psi))

    def oriented(self):
        return self.kernel.orientation * self.A

    def save(self, path):
        name = self.variant.encode("ascii")[:24]
        d = np.nan if self.delta is None else float(self.delta)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, 1, self.N, name, float(self.kernel.alpha), d))
            fh.write(np.ascontiguousarray(self.A, dtype="<f8").tobytes())

    @staticmethod
    def load(path):
        """Read a binary dump; returns (header dict, matrix)."""
        with open(path, "rb") as fh:
            raw = fh.read()
        magic, ver, N, name, alpha, delta = _HEADER.unpack_from(raw)
        if magic != _MAGIC:
            raise ValueError("not a rieszlab matrix file")
        A = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(N, N)
        return dict(version=ver, N=N, variant=name.rstrip(b"\0").decode(), alpha=alpha,
                    delta=None if np.isnan(delta) else delta), A.copy()


# ---------------------------------------------------------------------------
# assembly engine
# ---------------------------------------------------------------------------

def _validate_kernel(spec, kernel):
    if kernel.n != spec.n:
        raise ConfigurationError("kernel dimension does not match the manifold")
    inj = min(c.shape.injectivity() for c in spec.components)
    if kernel.c > 0.9 * inj:
        raise ConfigurationError(f"splitting radius {kernel.c} exceeds 0.9 x injectivity radius {inj:.4g}")
    sep = spec.min_separation()
    if kernel.c >= 0.5 * sep:
        raise ConfigurationError(f"splitting radius {kernel.c} must stay below half the "
                                 f"component separation {sep:.4g}")


class _Assembler:
    """Shared machinery for all Nystrom variants on one grid."""

    def __init__(self, grid, kernel, cut_start=None):
        _validate_kernel(grid.spec, kernel)
        self.grid = grid
        self.kernel = kernel
        self.spec = grid.spec
        self.c = kernel.c
        # the cutoff equals 1 on [0, cut_start] and reaches 0 at c
        self.cut_start = 0.5 * kernel.c if cut_start is None else float(cut_start)
        width = self.c - self.cut_start
        self.data = [_ComponentData(grid, ci, width) for ci in range(len(self.spec))]
        self._fans = {}
        # first radial panel: (radius * bandwidth, Gauss-Jacobi order)
        self.first_panel = (2.0, 12)

    # -- node bookkeeping ------------------------------------------------
    def orbit(self, ci):
        """Representative nodes of component ci and a function expanding their rows."""
        cg = self.grid.components[ci]
        sh = self.spec.components[ci].shape
        Nc = cg.size
        if len(self.spec) > 1 or sh.orbit_axis is None:
            return np.arange(Nc), None
        ax = sh.orbit_axis
        counts = cg.shape_counts
        idx = np.arange(Nc).reshape(counts)
        reps = np.take(idx, 0, axis=ax).ravel()

        def expand(rows):
            # rows (len(reps), Nc) -> (Nc, Nc)
            other = [c for a, c in enumerate(counts) if a != ax]
            R = rows.reshape(tuple(other) + counts)
            out = np.empty(counts + counts)
            for k in range(counts[ax]):
                sl = [slice(None)] * len(counts)
                sl[ax] = k
                out[tuple(sl)] = np.roll(R, k, axis=len(other) + ax)
            return out.reshape(Nc, Nc)
        return reps, expand

    def sizes(self, ci, length):
        """Radial Gauss order for an interval of given length."""
        bw = self.grid.bandwidth(ci)
        return int(np.ceil(0.7 * bw * length)) + 16

    def n_dirs(self, ci):
        if self.spec.m == 1:
            return 2
        bw = self.grid.bandwidth(ci)
        K = 2 * int(np.ceil(bw * self.c)) + 16
        return K + (K % 2)

    def fan(self, ci, nodes):
        key = (ci, tuple(nodes))
        if key not in self._fans:
            cg = self.grid.components[ci]
            self._fans[key] = PolarFan(self.spec, ci, cg.params[nodes], self.c * (1 + 1e-12),
                                       n_dirs=self.n_dirs(ci))
        return self._fans[key]

    # -- near field ------------------------------------------------------
    def near(self, ci, nodes, rho, coef, sub=None, chunk=None):
        """Near-field rows for radial nodes ``rho`` with weights ``coef``.

        Plain radii contribute ``coef sum_w w kappa J~ E(y)``; radii flagged in
        ``sub`` contribute the subtracted integrand
        ``coef sum_w w [kappa J~ (E(y) - e_i) + (kappa J~ - kappa0) e_i]``,
        assembled without forming the two large cancelling parts.

        Returns rows (B, Nc), their action on the constant (B,) and first
        moments ``sum q (y - x_i)`` (B, n).
        """
        kern = self.kernel
        m = self.spec.m
        fan = self.fan(ci, nodes)
        cg = self.grid.components[ci]
        N0 = cg.normals[nodes]
        B = len(nodes)
        sub = np.zeros(len(rho), bool) if sub is None else np.asarray(sub, bool)
        kap0 = _kappa0(kern)
        out_rows = np.zeros((B, cg.size))
        out_sum = np.zeros(B)
        out_mom = np.zeros((B, self.spec.n))
        wang = 1.0 if m == 1 else 2 * pi / fan.K
        step = chunk or max(1, int(4e6 // max(1, B * fan.K * cg.size)))
        for s in range(0, len(rho), step):
            r = rho[s:s + step]
            d = fan.at(r)
            Y, Dv = d["Y"], d["D"]                              # (R,B,K,n)
            if kern.kind == "riesz":
                # |y - x| = rho exactly in chord-polar coordinates
                kJ = d["Jt"]
                kJm = d["Jm1"]
            else:
                NY = self._normals(ci, d)
                kap = r[:, None, None] ** (m + kern.beta) * _kernel(
                    kern, -Dv, 0.0 * Dv, N0[None, :, None], NY)
                kJ = kap * d["Jt"]
                kJm = kJ - kap0
            cw = coef[s:s + step, None, None] * wang
            sb = np.broadcast_to(sub[s:s + step, None, None], kJ.shape)
            q = cw * kJ
            qd = cw * np.where(sb, kJm, kJ)       # action on the constant
            mv = lambda a: np.moveaxis(a, 1, 0).reshape(B, -1, *a.shape[3:])
            out_rows += self.data[ci].interp_rows(nodes, mv(d["dU"]), mv(Y), mv(q), mv(sb))
            diag = mv(np.where(sb, cw * kJm, 0.0)).sum(1)
            out_rows[np.arange(B), nodes] += diag
            out_sum += mv(qd).sum(1)
            out_mom += np.einsum("bq,bqn->bn", mv(q), mv(Dv))
        return out_rows, out_sum, out_mom

    def _normals(self, ci, d):
        sh = self.spec.components[ci].shape
        if sh.kind == "sphere":
            v = d["Y"] - self.spec.components[ci].c
            return v / np.linalg.norm(v, axis=-1, keepdims=True)
        U = d["U"]
        jj = jets(sh, U.reshape(-1, sh.m))
        return jj["n"].reshape(U.shape[:-1] + (sh.n,))

    # -- far field -------------------------------------------------------
    def far(self, ci, nodes, mode="smooth", delta=None):
        """Far-field rows over all grid nodes (B, N) plus constant action and moments.

        ``mode='smooth'``: ``(1 - chi) k`` on the own component;
        ``mode='mask'``: ``1{r >= delta} k`` (used when delta > c).
        """
        kern = self.kernel
        cg = self.grid.components[ci]
        X0 = cg.points[nodes]
        N0 = cg.normals[nodes]
        B = len(nodes)
        rows = np.zeros((B, self.grid.size))
        tot = np.zeros(B)
        mom = np.zeros((B, self.spec.n))
        for cj, dj in enumerate(self.data):
            P = dj.fpoints
            step = max(1, int(2e6 // len(P)))
            blocks = []
            for s in range(0, B, step):
                x = X0[s:s + step, None]
                diff = P[None] - x
                r = np.sqrt((diff * diff).sum(-1))
                with np.errstate(divide="ignore", invalid="ignore"):
                    k = _kernel(kern, x, P[None], N0[s:s + step, None], dj.fnormals[None])
                k = np.where(r > 0, k, 0.0)
                if cj == ci:
                    if mode == "smooth":
                        k = k * (1 - cutoff(r, self.c, self.cut_start))
                    else:
                        k = np.where(r >= delta, k, 0.0)
                k = np.where(np.isfinite(k), k, 0.0) * dj.fW
                tot[s:s + step] += k.sum(1)
                mom[s:s + step] += np.einsum("bq,bqn->bn", k, diff)
                blocks.append(dj.far_to_coarse(k))
            rows[:, self.grid.components[cj].sl] = np.concatenate(blocks)
        return rows, tot, mom

    # -- radial rules ----------------------------------------------------
    def rule_full(self, ci):
        """Radial rule for the finite part: subtracted panels on [0, c/2], chi on [c/2, c].

        Gauss-Jacobi (weight ``rho^(1-beta)``) is confined to a short first
        panel so its smallest node stays away from 0: rounding noise in
        ``F(rho) - F(0)`` is amplified by ``rho^(-1-beta)``.
        """
        c, beta = self.c, self.kernel.beta
        bw = self.grid.bandwidth(ci)
        r1 = min(0.5 * c, self.first_panel[0] / bw)
        ra, wa = _gauss_jacobi(self.first_panel[1], 1 - beta, 0.0, r1)
        rs, cs = [ra], [wa / ra**2]
        edges = [r1]
        while edges[-1] * 2 < 0.5 * c:
            edges.append(edges[-1] * 2)
        if edges[-1] < 0.5 * c:
            edges.append(0.5 * c)
        for lo, hi in zip(edges[:-1], edges[1:]):
            r, w = _gauss_legendre(self.sizes(ci, hi - lo), lo, hi)
            rs.append(r)
            cs.append(w * r ** (-1 - beta))
        sub = np.concatenate(cs)
        rb, wb = _gauss_legendre(self.sizes(ci, 0.5 * c), 0.5 * c, c)
        rho = np.concatenate(rs + [rb])
        coef = np.concatenate([sub, wb * rb ** (-1 - beta) * cutoff(rb, c)])
        mask = np.arange(len(rho)) < len(sub)
        # subtracted base value restored through its exact fp moment on [0, c/2]
        diag = _kappa0(self.kernel) * sphere_measure(self.spec.m) * fp_radial_moment(beta, 0.5 * c, 0)
        return rho, coef, mask, diag

    def rule_punched(self, ci, delta):
        c, beta = self.c, self.kernel.beta
        if delta > self.cut_start + 1e-14 * c:
            raise ValueError("punched radius inside the cutoff transition")
        if delta >= self.cut_start - 1e-14 * c:
            rb, wb = _gauss_legendre(self.sizes(ci, c - delta) + 8, delta, c)
            return rb, wb * rb ** (-1 - beta) * cutoff(rb, c, self.cut_start)
        edges = [delta]
        while edges[-1] * 2 < 0.5 * c:
            edges.append(edges[-1] * 2)
        edges.append(0.5 * c)
        rs, ws = [], []
        for lo, hi in zip(edges[:-1], edges[1:]):
            r, w = _gauss_legendre(self.sizes(ci, hi - lo), lo, hi)
            rs.append(r)
            ws.append(w * r ** (-1 - beta))
        rb, wb = _gauss_legendre(self.sizes(ci, 0.5 * c), 0.5 * c, c)
        rs.append(rb)
        ws.append(wb * rb ** (-1 - beta) * cutoff(rb, c))
        return np.concatenate(rs), np.concatenate(ws)

    # -- drivers ---------------------------------------------------------
    def operator_rows(self, variant, delta=None, gradient=True):
        """Full Nystrom operator K (N x N), row sums of the pv part (h), and moments."""
        N = self.grid.size
        K = np.zeros((N, N))
        h = np.zeros(N)
        for ci, cg in enumerate(self.grid.components):
            reps, expand = self.orbit(ci)
            B = len(reps)
            rows = np.zeros((B, N))
            sl = cg.sl
            hv = np.zeros(B)
            if variant == "full":
                rho, coef, mask, diag = self.rule_full(ci)
                nr, ns, nm = self.near(ci, reps, rho, coef, mask)
                fr, fs, fm = self.far(ci, reps)
                rows[:, sl] += nr
                rows += fr
                rows[np.arange(B), sl.start + reps] += diag
                hv = ns + fs + diag
                mom = nm + fm
                if self.kernel.beta > 1 and gradient:
                    # pv integrand minus (y - x).grad phi(x), plus h_vec . grad phi(x);
                    # h_vec is evaluated independently by the sharp-split formula
                    hvec = np.stack([h_terms(self.spec, self.kernel, ci, cg.params[i])["hvec"]
                                     for i in reps])
                    rows[:, sl] += self.data[ci].gradient_rows(reps, hvec - mom)
            elif variant == "punched":
                if delta <= self.cut_start * (1 + 1e-14):
                    rho, coef = self.rule_punched(ci, delta)
                    nr, ns, _ = self.near(ci, reps, rho, coef)
                    fr, fs, _ = self.far(ci, reps)
                    rows[:, sl] += nr
                    rows += fr
                    hv = ns + fs
                else:
                    fr, fs, _ = self.far(ci, reps, mode="mask", delta=delta)
                    rows += fr
                    hv = fs
            else:
                raise ValueError(variant)
            if expand is not None:
                full = np.zeros((cg.size, N))
                full[:, sl] = expand(rows[:, sl])
                rows = full
                hv = _expand_vec(hv, cg, self.spec.components[ci].shape)
            K[sl] = rows
            h[sl] = hv
        return K, h


def _expand_vec(v, cg, sh):
    counts = cg.shape_counts
    ax = sh.orbit_axis
    other = [c for a, c in enumerate(counts) if a != ax]
    V = v.reshape(other)
    return np.repeat(np.expand_dims(V, ax), counts[ax], axis=ax).ravel()


def _finish(K, grid, kernel, variant, delta=None, h=None, meta=None):
    A = grid.W[:, None] * K
    scale = np.abs(A).max()
    asym = float(np.abs(A - A.T).max() / scale) if scale > 0 else 0.0
    A = 0.5 * (A + A.T)
    return OperatorMatrix(A, grid.W.copy(), kernel, variant, delta, asym, h, meta or {})


def assemble_V(grid, kernel):
    """Finite-part operator as a symmetric quadratic-form matrix (variant ``fp_full``)."""
    if kernel.kind != "riesz":
        raise ConfigurationError("assemble_V needs a Riesz kernel")
    eng = _Assembler(grid, kernel)
    K, h = eng.operator_rows("full")
    return _finish(K, grid, kernel, "fp_full", h=h)


def _check_delta(grid, kernel, delta, allow_subgrid):
    if not delta > 0:
        raise ConfigurationError("delta must be positive")
    if not allow_subgrid and delta < 4 * grid.h_grid:
        raise ConfigurationError(
            f"delta={delta:.6g} is below 4*h_grid={4 * grid.h_grid:.6g}; the cut would not be "
            f"resolved by the grid (pass allow_subgrid=True to integrate it on the interpolant)")


def assemble_punched(grid, kernel, delta, allow_subgrid=False, _engine=None):
    """Quadratic form of ``k 1{|x-y| >= delta}``.

    The cut is integrated exactly in ``rho`` inside the chord-polar near
    field.  For ``delta > c/2`` the cutoff transition is moved to
    ``[delta, c']`` with ``c' = max(c, delta / 0.75)``; when ``c'`` violates
    the geometric limits a plain masked trapezoidal sum is used instead,
    accurate only to first order in the grid spacing.
    """
    _check_delta(grid, kernel, delta, allow_subgrid)
    if kernel.kind != "riesz":
        raise ConfigurationError("punched kernels are Riesz kernels")
    diam = max(c.shape.diameter() for c in grid.spec.components)
    if len(grid.spec) == 1 and delta >= diam:
        return OperatorMatrix(np.zeros((grid.size, grid.size)), grid.W.copy(), kernel,
                              "punched", delta)
    eng = _engine or _Assembler(grid, kernel)
    if eng.cut_start < delta:
        # the punched form does not depend on c: move the cutoff transition to
        # [delta, c'] so the far field stays smooth, enlarging c if allowed
        c_new = max(kernel.c, delta / PUNCHED_SHIFT_LIMIT)
        try:
            eng = _Assembler(grid, kernel.replace(c=c_new), cut_start=delta)
        except ConfigurationError:
            pass
    K, h = eng.operator_rows("punched", delta)
    return _finish(K, grid, kernel, "punched", delta, h)


def assemble_P(grid, kernel, delta, V=None, allow_subgrid=False, _engine=None):
    """Compensator ``P = V - punched`` and ``P' = P + (beta c_m)^-1 delta^-beta M``."""
    _check_delta(grid, kernel, delta, allow_subgrid)
    eng = _engine or _Assembler(grid, kernel)
    if V is None:
        K, h = eng.operator_rows("full")
        V = _finish(K, grid, kernel, "fp_full", h=h)
    Pn = assemble_punched(grid, kernel, delta, allow_subgrid, _engine=eng)
    P = V.A - Pn.A
    shift = delta ** (-kernel.beta) / (kernel.beta * kernel.cm)
    Pp = P + shift * np.diag(grid.W)
    return (OperatorMatrix(P, grid.W.copy(), kernel, "compensator", delta),
            OperatorMatrix(Pp, grid.W.copy(), kernel, "compensator_prime", delta),
            Pn)


def compensator_gradient(P):
    """Gradient operator ``G = 2 sym(P)`` of the quadratic form ``phi -> phi^T P phi``."""
    A = P.A if isinstance(P, OperatorMatrix) else np.asarray(P)
    G = A + A.T
    if isinstance(P, OperatorMatrix):
        return OperatorMatrix(G, P.W, P.kernel, "compensator_gradient", P.delta)
    return G


def assemble_D(grid, c=None):
    """Hypersingular Laplace operator on a sphere grid (variant ``hypersingular_D``)."""
    spec = grid.spec
    if spec.n != 3 or any(cc.shape.kind != "sphere" for cc in spec.components):
        raise ConfigurationError("assemble_D supports sphere components only")
    if c is None:
        c = 0.6 * min(cc.shape.R for cc in spec.components)
    kernel = KernelSpec(0.0, 3, c, kind="laplace_hypersingular")
    eng = _Assembler(grid, kernel)
    K, h = eng.operator_rows("full")
    return _finish(K, grid, kernel, "hypersingular_D", h=h)


# ---------------------------------------------------------------------------
# h(x) by the sharp-split formulas
# ---------------------------------------------------------------------------

def _outer_radii(shape):
    """Polar region used for the far field on surfaces: chi_out = 1 on [0, R1], 0 past R2."""
    R2 = 0.8 * shape.injectivity()
    return 0.6 * R2, R2


def _cutoff_between(rho, R1, R2):
    t = np.clip((np.asarray(rho, float) - R1) / (R2 - R1), 0, 1)
    a, b = _psi(t), _psi(1 - t)
    return b / (a + b)


def h_terms(spec, kernel, component, u, n_near=48, n_dirs=64):
    """Split evaluation of ``h(x) = fp int k ds_y`` and ``h_vec(x) = fp int k (y - x) ds_y``.

    Terms (all with a sharp split at ``c``):

    * ``T1``: true kernel minus the polar model kernel inside ``A <= c``
      (identically zero in chord coordinates, evaluated numerically);
    * ``T2``: ``-(beta c_m)^-1 c^-beta``;
    * ``T3``: measure defect ``int_0^c rho^(-1-beta) int (J~ - 1) dw drho``;
    * ``T4``: ``int_{A >= c} k ds``.

    Returns a dict with the terms, ``h`` and the vector ``hvec``.
    """
    if kernel.kind != "riesz":
        raise ConfigurationError("h_terms needs a Riesz kernel")
    _validate_kernel(spec, kernel)
    comp = spec.components[component]
    sh = comp.shape
    m, beta, c = sh.m, kernel.beta, kernel.c
    u = np.atleast_1d(np.asarray(u, float))
    d0 = jets(sh, u[None])
    x0 = d0["x"][0] + comp.c
    R1, R2 = _outer_radii(sh)
    if m == 2 and c > R1:
        raise ConfigurationError(f"splitting radius {c} exceeds the polar far-field radius {R1:.4g}")
    rmax = c if m == 1 else R2
    fan = PolarFan(spec, component, u[None], rmax * (1 + 1e-12), n_dirs=n_dirs)
    wang = 1.0 if m == 1 else 2 * pi / fan.K
    ra, wa = _gauss_jacobi(n_near, 1 - beta, 0.0, c)
    d = fan.at(ra)
    Dv, Jt = d["D"][:, 0], d["Jt"][:, 0]
    # chord-polar radius equals the chord, so the model-kernel defect is zero
    # up to the ray-integration error; it is measured, not assumed
    dist = np.sqrt((Dv * Dv).sum(-1))
    defect = float(np.abs(dist / ra[:, None] - 1).max())
    T1 = 0.0
    T2 = -c ** (-beta) / (beta * c_m(m))
    T3 = float((wa / ra**2) @ (wang * d["Jm1"][:, 0].sum(1)))
    hv_near = (wa / ra**2) @ (wang * np.einsum("rk,rkn->rn", Jt, Dv))
    if m == 1:
        T4, hv_far = _far_curve(spec, kernel, component, u, x0, fan)
    else:
        T4, hv_far = _far_surface(spec, kernel, component, x0, fan, c, R1, R2, wang)
    return dict(T1=T1, T2=T2, T3=T3, T4=T4, h=T1 + T2 + T3 + T4, chord_defect=defect,
                hvec=hv_near + hv_far, hvec_near=hv_near, hvec_far=hv_far)


def _far_curve(spec, kernel, ci, u, x0, fan):
    """Adaptive quadrature over the arcs where |y - x0| >= c, plus other components."""
    s = kernel.m + kernel.beta
    ends = fan.at([kernel.c])["U"][0, 0, :, 0]      # (+, -) parameters at rho = c

    def integrand(t, comp):
        t = np.atleast_1d(t)
        X = comp.shape.partial(t[:, None], (0,)) + comp.c
        D = comp.shape.partial(t[:, None], (1,))
        diff = X - x0
        r2 = (diff * diff).sum(-1)
        wt = r2 ** (-s / 2) * np.linalg.norm(D, axis=-1)
        return np.concatenate([wt, (wt[:, None] * diff).ravel()])

    total = np.zeros(3)
    for cj, comp in enumerate(spec.components):
        if cj == ci:
            lo, hi = ends[0], ends[1] + 2 * pi
        else:
            lo, hi = 0.0, 2 * pi
        val, _ = integrate.quad_vec(lambda t: integrand(t, comp), lo, hi, epsabs=1e-14,
                                    epsrel=1e-13, limit=400)
        total += val
    return float(total[0]), total[1:]


def _far_surface(spec, kernel, ci, x0, fan, c, R1, R2, wang, target=None):
    """Polar part on [c, R2] with the outer cutoff, plus a fine trapezoidal remainder."""
    s = kernel.m + kernel.beta
    nb = 64
    rs, ws = [], []
    for lo, hi in ((c, R1), (R1, R2)):
        if hi > lo:
            r, w = _gauss_legendre(nb, lo, hi)
            rs.append(r)
            ws.append(w)
    r = np.concatenate(rs)
    w = np.concatenate(ws) * r ** (1 - (kernel.m + kernel.beta)) * _cutoff_between(r, R1, R2)
    # J_pol = rho * Jt on surfaces; kernel rho^-s exactly up to the chord defect
    d = fan.at(r)
    Dv, Jt = d["D"][:, 0], d["Jt"][:, 0]
    T = float(w @ (wang * Jt.sum(1)))
    hv = w @ (wang * np.einsum("rk,rkn->rn", Jt, Dv))
    # remainder on a fine grid of every component
    spacing = target or (R2 - R1) / 24
    for cj, comp in enumerate(spec.components):
        sh = comp.shape
        if sh.kind == "torus":
            counts = (_pow2_at_least(2 * pi * (sh.R0 + sh.r) / spacing),
                      _pow2_at_least(2 * pi * sh.r / spacing))
        else:
            counts = (_pow2_at_least(pi * sh.R / spacing), 2 * _pow2_at_least(pi * sh.R / spacing))
        fg = _fine_grid(comp, counts)
        diff = fg.points - x0
        rr = np.sqrt((diff * diff).sum(-1))
        with np.errstate(divide="ignore"):
            k = np.where(rr > 0, rr ** (-s), 0.0)
        if cj == ci:
            k = k * (1 - _cutoff_between(rr, R1, R2))
        k = np.where(np.isfinite(k), k, 0.0) * fg.W
        T += float(k.sum())
        hv = hv + k @ diff
    return T, hv


_FINE_CACHE = {}


def _fine_grid(comp, counts):
    key = (repr(comp.shape), tuple(np.asarray(comp.c, float)), counts)
    if key not in _FINE_CACHE:
        if len(_FINE_CACHE) > 8:
            _FINE_CACHE.clear()
        _FINE_CACHE[key] = Grid(ManifoldSpec([comp]), [counts]).components[0]
    return _FINE_CACHE[key]


def _pow2_at_least(x):
    n = 16
    while n < x:
        n *= 2
    return n


def h_scalar(spec, kernel, component, u):
    """``h(x)`` at ``x = x(u)`` on the given component."""
    return h_terms(spec, kernel, component, u)["h"]


def h_vector(spec, kernel, component, u):
    """``h_vec(x) = fp int k (y - x) ds_y`` (used by the beta > 1 branch)."""
    if kernel.beta <= 1:
        warnings.warn("h_vector is only needed for beta > 1")
    return h_terms(spec, kernel, component, u)["hvec"]

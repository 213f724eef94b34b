"""Discrete Sobolev norms on periodic grids and the coercivity pencil.

``S_s = W^(1/2) F^H diag((1 + |k|^2)^s) F W^(1/2)`` per component, with
``F`` the unitary DFT on the tensor grid and ``k`` the chart frequencies.
``S_0`` is the quadrature mass matrix.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .geometry import ConfigurationError

__all__ = ["SobolevGram", "gram", "mass", "h_eps_norm", "PencilResult", "garding_pencil",
           "select_orientation", "OrientationChoice"]


@dataclass
class SobolevGram:
    s: float
    S: np.ndarray

    def norm2(self, phi):
        phi = np.asarray(phi, float)
        return float(phi @ self.S @ phi)

    def norm(self, phi):
        return float(np.sqrt(self.norm2(phi)))


def _multiplier(counts, s):
    ks = np.meshgrid(*[np.fft.fftfreq(N, 1.0 / N) for N in counts], indexing="ij")
    return (1.0 + sum(k**2 for k in ks)) ** s


def _component_gram(counts, w, s):
    """Dense ``W^(1/2) F^H diag(mult) F W^(1/2)`` on one tensor grid."""
    n = int(np.prod(counts))
    mult = _multiplier(counts, s)
    eye = np.eye(n).reshape((n,) + tuple(counts))
    axes = tuple(range(1, len(counts) + 1))
    # columns of F^H diag(mult) F, obtained by filtering unit vectors
    cols = np.fft.ifftn(mult * np.fft.fftn(eye, axes=axes), axes=axes).real.reshape(n, n)
    r = np.sqrt(w)
    return r[:, None] * cols.T * r[None, :]


def gram(grid, s):
    """Block-diagonal Sobolev Gram matrix of order ``s`` on a circle/ellipse/torus grid."""
    S = np.zeros((grid.size, grid.size))
    for ci, cg in enumerate(grid.components):
        if grid.spec.components[ci].shape.kind == "sphere":
            raise ConfigurationError("Sobolev Gram matrices are defined on periodic charts only")
        S[cg.sl, cg.sl] = _component_gram(cg.shape_counts, cg.W, s)
    return SobolevGram(float(s), 0.5 * (S + S.T))


def mass(grid):
    return np.diag(grid.W)


def h_eps_norm(A, W, phi, eps):
    """``eps * phi^T A phi + ||phi||^2_{L2}`` with ``A`` the oriented form matrix.

    Returns ``(value, degenerate)``; ``degenerate`` flags a non-positive value
    for a non-zero ``phi``.
    """
    if eps < 0:
        raise ValueError("epsilon must be nonnegative")
    phi = np.asarray(phi, float)
    val = float(eps * (phi @ A @ phi) + phi @ (W * phi))
    return val, bool(val <= 0 and np.any(phi != 0))


def _gen_eig(A, B, which):
    ev = linalg.eigh(0.5 * (A + A.T), 0.5 * (B + B.T), eigvals_only=True,
                     subset_by_index=[0, 0] if which == "min" else [len(A) - 1, len(A) - 1])
    return float(ev[0])


@dataclass
class PencilResult:
    orientation: int
    c0: float
    c1: float
    c2: float
    min_eig: float

    def as_dict(self):
        return dict(orientation=self.orientation, c0=self.c0, c1=self.c1, c2=self.c2,
                    min_eig=self.min_eig)


def required_shift(A, W):
    """Smallest ``c1 >= 0`` making ``A + c1 M`` positive semidefinite."""
    lam = _gen_eig(A, np.diag(W), "min")
    return max(0.0, -lam)


def garding_pencil(A, W, S, c1=None, margin=None, orientation=0):
    """Fit ``(c0, c1, c2)`` for ``c0 ||phi||_S^2 <= phi^T (A + c1 M) phi`` and ``phi^T A phi <= c2 ||phi||_S^2``.

    ``A`` is the oriented form matrix and ``S`` the Gram matrix of order
    ``beta/2``.  When ``c1`` is not given it is the smallest shift making
    ``A + c1 M`` semidefinite plus ``margin`` (default: a quarter of the
    largest pencil eigenvalue, so ``c0`` is not pinned at zero).
    """
    if c1 is None:
        c2 = _gen_eig(A, S, "max")
        margin = 0.25 * abs(c2) if margin is None else margin
        c1 = required_shift(A, W) + margin
    c0 = _gen_eig(A + c1 * np.diag(W), S, "min")
    c2 = _gen_eig(A, S, "max")
    return PencilResult(orientation, c0, float(c1), c2, c0)


def pencil_min(A, W, S, c1):
    return _gen_eig(A + c1 * np.diag(W), S, "min")


@dataclass
class OrientationChoice:
    orientation: int
    shifts: dict = field(default_factory=dict)


def select_orientation(A_coarse, W_coarse, A_fine, W_fine):
    """Pick ``s`` in {+1, -1} whose required shift ``c1`` stays bounded under refinement.

    A coercive orientation needs a resolution-independent shift, while the
    wrong sign needs one growing like the largest eigenvalue.  The sign with
    the smaller growth ratio wins; ties are reported with a warning.
    """
    shifts = {}
    for s in (1, -1):
        a = required_shift(s * A_coarse, W_coarse)
        b = required_shift(s * A_fine, W_fine)
        shifts[s] = (a, b)
    growth = {s: (b + 1.0) / (a + 1.0) for s, (a, b) in shifts.items()}
    best = min(growth, key=growth.get)
    if abs(growth[1] - growth[-1]) < 1e-3:
        warnings.warn("orientation ambiguous: both signs need comparable shifts")
    return OrientationChoice(best, {str(k): v for k, v in shifts.items()})

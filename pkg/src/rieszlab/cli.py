"""Configuration-driven experiment runner.

``rieszlab <subcommand> --config <path> [--out <dir>] [--seed <u64>] [--threads <k>]``

Every run writes ``<out>/<subcommand>.csv`` and ``<out>/report.json``.
Exit codes: 0 success, 2 validation error (nothing written), 3 numeric
failure (report written with the diagnostic).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import platform
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
from scipy import linalg

from . import __version__
from . import discrete as D
from . import fpquad as F
from . import gauss as G
from . import martensen as M
from . import sobolev as S
from scipy.special import zeta

from .geometry import SHAPES, Component, ConfigurationError, Grid, ManifoldSpec

SCHEMA_VERSION = 1
SUBCOMMANDS = ("symbol-check", "assemble", "garding", "gauss", "punched-sweep", "expansion",
               "discrete-sweep", "martensen")
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3


# ---------------------------------------------------------------------------
# expression catalog
# ---------------------------------------------------------------------------

def _wrap(d, period):
    return (d + 0.5 * period) % period - 0.5 * period


def _expr_constant(U, periods, value=1.0):
    return np.full(len(U), float(value))


def _expr_cosine_band(U, periods, k=1.0, amplitude=1.0, offset=0.0, axis=0.0):
    ax = int(axis)
    return offset + amplitude * np.cos(k * U[:, ax] * (2 * np.pi / periods[ax]))


def _expr_bump(U, periods, u0=0.0, v0=0.0, width=0.5, height=1.0, offset=0.0):
    c = [u0, v0][:U.shape[1]]
    r2 = sum(_wrap(U[:, j] - c[j], periods[j]) ** 2 for j in range(U.shape[1]))
    return offset + height * np.exp(-r2 / (2 * width**2))


def _expr_trig(U, periods, axis=0.0, **coef):
    ax = int(axis)
    t = U[:, ax] * (2 * np.pi / periods[ax])
    out = np.zeros(len(U))
    for key, val in coef.items():
        k = int(key[1:])
        out += val * (np.cos(k * t) if key[0] == "c" else np.sin(k * t))
    return out


CATALOG = {
    "constant": (_expr_constant, {"value"}),
    "cosine-band": (_expr_cosine_band, {"k", "amplitude", "offset", "axis"}),
    "gaussian-bump-on-chart": (_expr_bump, {"u0", "v0", "width", "height", "offset"}),
    "trig-polynomial": (_expr_trig, {"axis"}),
}

_EXPR_RE = re.compile(r"^\s*([A-Za-z][\w-]*)\s*(?:\((.*)\))?\s*$")


@dataclass
class Expression:
    """A named closed-form function of the chart parameters."""
    name: str
    params: dict

    def __call__(self, U, periods):
        fn, _ = CATALOG[self.name]
        return fn(np.atleast_2d(U), periods, **self.params)

    def on_grid(self, grid):
        vals = [self(cg.params, grid.spec.components[cg.index].shape.periods)
                for cg in grid.components]
        return np.concatenate(vals)

    def __str__(self):
        inner = ", ".join(f"{k}={v:g}" for k, v in self.params.items())
        return f"{self.name}({inner})"


def parse_expression(text):
    m = _EXPR_RE.match(text)
    if not m:
        raise ConfigurationError(f"cannot parse expression {text!r}")
    name, body = m.group(1), m.group(2)
    if name not in CATALOG:
        raise ConfigurationError(f"unknown expression {name!r}; catalog: {', '.join(CATALOG)}")
    params = {}
    for item in filter(None, (p.strip() for p in (body or "").split(","))):
        if "=" not in item:
            raise ConfigurationError(f"expression parameter {item!r} must be key=value")
        k, v = (x.strip() for x in item.split("=", 1))
        allowed = CATALOG[name][1]
        if name == "trig-polynomial" and re.fullmatch(r"[cs]\d+", k):
            pass
        elif k not in allowed:
            raise ConfigurationError(f"expression {name!r} has no parameter {k!r}")
        params[k] = _float(v, f"{name}.{k}")
    return Expression(name, params)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _float(text, what):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{what}: {text!r} is not a number") from None


def parse_values(text, what):
    """``geom(a, b, n)``, ``lin(a, b, n)`` or a comma list."""
    text = text.strip()
    m = re.fullmatch(r"(geom|lin)\((.*)\)", text)
    if m:
        parts = [p.strip() for p in m.group(2).split(",")]
        if len(parts) != 3:
            raise ConfigurationError(f"{what}: {m.group(1)}() takes start, stop, count")
        a, b = _float(parts[0], what), _float(parts[1], what)
        n = int(_float(parts[2], what))
        if m.group(1) == "geom":
            if a <= 0 or b <= 0:
                raise ConfigurationError(f"{what}: geom() needs positive endpoints")
            return list(np.geomspace(a, b, n))
        return list(np.linspace(a, b, n))
    return [_float(p, what) for p in text.split(",") if p.strip()]


def _bool(text):
    return str(text).strip().lower() in ("1", "yes", "true", "on")


def parse_component(text):
    """``circle R=1 center=0,0 sign=1`` -> Component."""
    tokens = text.split()
    if not tokens:
        raise ConfigurationError("empty component description")
    kind = tokens[0].lower()
    if kind not in SHAPES:
        raise ConfigurationError(f"unknown shape {kind!r}; known: {', '.join(SHAPES)}")
    kw, center, sign = {}, None, 1
    for tok in tokens[1:]:
        if "=" not in tok:
            raise ConfigurationError(f"component token {tok!r} must be key=value")
        k, v = tok.split("=", 1)
        if k == "center":
            center = tuple(_float(x, "center") for x in v.split(","))
        elif k == "sign":
            sign = int(_float(v, "sign"))
        else:
            kw[k] = _float(v, f"{kind}.{k}")
    try:
        shape = SHAPES[kind](**kw)
    except TypeError:
        raise ConfigurationError(f"bad parameters for {kind}: {sorted(kw)}") from None
    return Component(shape, center, sign)


@dataclass
class CaseConfig:
    name: str
    spec: ManifoldSpec
    counts: list                  # per component: int or tuple
    N_levels: list                # extra resolutions (garding)
    alphas: list
    c: float
    kind: str
    orientation: str
    allow_subgrid: bool
    deltas: list
    epsilons: list
    check_v1: bool
    sample_nodes: int
    u0: list
    f: Expression = None
    g: Expression = None
    phi: Expression = None
    a: list = field(default_factory=lambda: [1.0])
    _grid: object = None

    def grid(self, counts=None):
        if counts is None:
            if self._grid is None:
                self._grid = Grid(self.spec, self.counts)
            return self._grid
        return Grid(self.spec, counts)

    def kernel(self, alpha, orientation=1):
        return F.KernelSpec(alpha, self.spec.n, self.c, orientation,
                            "riesz" if self.kind == "riesz" else "laplace_hypersingular")


@dataclass
class RunConfig:
    path: str
    raw: dict
    cases: list
    N_list: list
    s_list: list
    seed: int
    restarts: int
    max_iter: int
    tol: float
    kmin: int
    kmax: int
    oracle_instances: int
    oracle_size: int
    out: str
    matrices: bool
    component: int = 0
    diagnostics: list = field(default_factory=list)


class _Lookup:
    """Key lookup with case-section overrides."""

    def __init__(self, cp, case=None):
        self.cp, self.case = cp, case

    def get(self, section, key, default=None):
        if self.case is not None and self.cp.has_option(self.case, key):
            return self.cp.get(self.case, key)
        if self.cp.has_section(section) and self.cp.has_option(section, key):
            return self.cp.get(section, key)
        return default

    def components(self):
        src = self.case if self.case and any(
            k.startswith("component.") for k in self.cp[self.case]) else "manifold"
        if not self.cp.has_section(src):
            return []
        items = [(k, v) for k, v in self.cp[src].items() if k.startswith("component.")]
        items.sort(key=lambda kv: int(kv[0].split(".", 1)[1]))
        return [v for _, v in items]


def _counts(text, spec, diags, where):
    """``256`` | ``32x32`` | per-component ``;`` list."""
    parts = [p.strip() for p in text.split(";")] if ";" in text else [text.strip()] * len(spec)
    if len(parts) != len(spec):
        diags.append(f"{where}: N needs one entry per component ({len(spec)})")
        return None
    out = []
    for p, comp in zip(parts, spec.components):
        vals = [int(_float(x, "N")) for x in p.lower().split("x")]
        if len(vals) == 1:
            vals = vals * comp.shape.m
        if len(vals) != comp.shape.m:
            diags.append(f"{where}: N={p!r} does not match a {comp.shape.m}-dimensional component")
            return None
        for v in vals:
            if v < 16 or v & (v - 1):
                diags.append(f"{where}: node count {v} must be a power of two >= 16")
                return None
        out.append(tuple(vals))
    return out


def _guard(diags, fn, *args, default=None):
    try:
        return fn(*args)
    except ConfigurationError as exc:
        diags.append(str(exc))
    except ValueError as exc:
        diags.append(str(exc))
    return default


def load_config(path, subcommand=None, seed=None, out=None):
    """Parse and fully validate a configuration; collects diagnostics instead of stopping."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    diags = []
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        return None, [f"cannot read config {path}: {exc}"]
    L = _Lookup(cp)

    def num(section, key, default, lo=None, hi=None, integer=False, lk=L):
        raw = lk.get(section, key)
        if raw is None:
            return default
        v = _guard(diags, _float, raw, f"[{section}] {key}")
        if v is None:
            return default
        if lo is not None and v < lo or hi is not None and v > hi:
            diags.append(f"[{section}] {key}={v:g} outside [{lo}, {hi}]")
        return int(v) if integer else v

    seed_v = num("solver", "seed", 0, lo=0, integer=True) if seed is None else int(seed)
    if not 0 <= seed_v < 2**64:
        diags.append("seed must be a 64-bit unsigned integer")
    restarts = num("solver", "restarts", 4, lo=1, integer=True)
    max_iter = num("solver", "max_iter", 20000, lo=1, integer=True)
    tol = num("solver", "tol", 1e-12, lo=0)
    kmin = num("symbol", "kmin", 8, lo=1, integer=True)
    kmax = num("symbol", "kmax", 32, lo=1, integer=True)
    if kmax < kmin:
        diags.append("[symbol] kmax must be >= kmin")
    inst = num("oracle", "instances", 0, lo=0, integer=True)
    size = num("oracle", "size", 8, lo=2, hi=14, integer=True)
    N_list = [int(v) for v in _guard(diags, parse_values, L.get("sweep", "N", ""), "[sweep] N",
                                     default=[])]
    s_list = _guard(diags, parse_values, L.get("sweep", "s", ""), "[sweep] s", default=[])
    component = num("discrete", "component", 0, lo=0, integer=True)

    # cases
    case_names = [s for s in cp.sections() if s.startswith("case.")]
    cases = []
    for cname in case_names or [None]:
        lk = _Lookup(cp, cname)
        where = cname or "manifold"
        exprs = {}
        for key, default in (("f", "constant(value=0)"), ("g", "constant(value=1)"),
                             ("phi", None)):
            text = lk.get("problem", key, default)
            exprs[key] = None if text is None else _guard(diags, parse_expression, text)
        a = _guard(diags, parse_values, lk.get("problem", "a", "1"), "[problem] a", default=[1.0])
        if any(v <= 0 for v in a):
            diags.append(f"[problem] a must be positive, got {a}")
        comps = [_guard(diags, parse_component, t) for t in lk.components()]
        if not comps:
            diags.append(f"[{where}] defines no components (component.0 = ...)")
            continue
        if any(c is None for c in comps):
            continue
        spec = _guard(diags, ManifoldSpec, comps)
        if spec is None:
            continue
        counts = _counts(lk.get("grid", "N", "64"), spec, diags, where) if \
            "," not in lk.get("grid", "N", "64") else None
        levels = []
        if "," in lk.get("grid", "N", ""):
            # several resolutions: first is the working grid
            for part in lk.get("grid", "N").split(","):
                cnt = _counts(part, spec, diags, where)
                if cnt:
                    levels.append(cnt)
            counts = levels[0] if levels else None
        if counts is None:
            continue
        alphas = _guard(diags, parse_values, lk.get("kernel", "alpha", "0"), "[kernel] alpha",
                        default=[])
        for al in alphas:
            if not -1 < al < 1:
                diags.append(f"[kernel] alpha={al:g} must lie in (-1, 1)")
        kind = lk.get("kernel", "kind", "riesz").strip()
        if kind not in ("riesz", "laplace_hypersingular"):
            diags.append(f"[kernel] kind={kind!r} must be riesz or laplace_hypersingular")
        c = num("kernel", "c", 0.5 * min(cc.shape.injectivity() for cc in comps), lo=0, lk=lk)
        if not c > 0:
            diags.append("[kernel] c must be positive")
        orient = lk.get("kernel", "orientation", "auto").strip()
        if orient not in ("auto", "1", "-1", "+1"):
            diags.append(f"[kernel] orientation={orient!r} must be auto, 1 or -1")
        allow_sub = _bool(lk.get("solver", "allow_subgrid", "no"))
        deltas = _guard(diags, parse_values, lk.get("sweep", "delta", ""), "[sweep] delta",
                        default=[])
        eps = _guard(diags, parse_values, lk.get("sweep", "epsilon", ""), "[sweep] epsilon",
                     default=[])
        if any(e < 0 for e in eps):
            diags.append("[sweep] epsilon values must be nonnegative")
        u0 = _guard(diags, parse_values, lk.get("martensen", "u0", "0.4, 0.7"), "[martensen] u0",
                    default=[0.4, 0.7])
        case = CaseConfig(cname[5:] if cname else "main", spec, counts, levels, alphas, c, kind,
                          orient, allow_sub, deltas, eps,
                          _bool(lk.get("assemble", "check_v1", "no")),
                          int(_float(lk.get("assemble", "sample_nodes", "4"), "sample_nodes")),
                          u0, exprs.get("f"), exprs.get("g"), exprs.get("phi"), a)
        if kind == "riesz" and alphas and c > 0:
            for al in alphas[:1]:
                _guard(diags, F._validate_kernel, spec, case.kernel(al))
        grid = _guard(diags, case.grid)
        if grid is not None:
            for d in deltas:
                if d <= 0:
                    diags.append(f"[sweep] delta={d:g} must be positive")
                elif d < 4 * grid.h_grid and not allow_sub:
                    diags.append(f"[{where}] delta={d:.6g} is below 4*h_grid={4 * grid.h_grid:.6g} "
                                 f"(h_grid={grid.h_grid:.6g}); set allow_subgrid = yes to override")
            for key in ("f", "g", "phi"):
                if exprs.get(key) is not None:
                    vals = exprs[key].on_grid(grid)
                    if not np.all(np.isfinite(vals)):
                        diags.append(f"[problem] {key} is not finite on the grid")
                    if key == "g" and np.any(vals <= 0):
                        diags.append("[problem] g must be strictly positive on the grid")
            if len(a) not in (1, len(spec)):
                diags.append(f"[{where}] a has {len(a)} values but the manifold has "
                             f"{len(spec)} component(s)")
        cases.append(case)

    # subcommand-specific requirements
    if subcommand == "expansion":
        for cs in cases:
            if len(cs.epsilons) < 4:
                diags.append(f"fewer than 4 sweep points ([sweep] epsilon has {len(cs.epsilons)})")
    if subcommand == "punched-sweep":
        for cs in cases:
            if not cs.deltas:
                diags.append("[sweep] delta is required for punched-sweep")
    if subcommand == "garding":
        for cs in cases:
            if len(cs.N_levels) < 2:
                diags.append("[grid] N needs at least two resolutions for garding (e.g. 128, 256)")
    if subcommand == "discrete-sweep":
        if len(N_list) < 4:
            diags.append(f"[sweep] N needs at least 4 values, got {len(N_list)}")
        if not s_list:
            diags.append("[sweep] s is required for discrete-sweep")
        for cs in cases:
            if component >= len(cs.spec):
                diags.append(f"[discrete] component={component} does not exist")
            else:
                m = cs.spec.components[component].shape.m
                for s in s_list:
                    if not s > m:
                        diags.append(f"[sweep] s={s:g} must exceed the dimension {m}")
    out_dir = out or L.get("output", "dir", "out")
    cfg = RunConfig(str(path), {s: dict(cp[s]) for s in cp.sections()}, cases, N_list, s_list, seed_v, restarts,
                    max_iter, tol, kmin, kmax, inst, size, out_dir,
                    _bool(L.get("output", "matrices", "no")), component, diags)
    return cfg, diags


def validate(path, subcommand=None):
    """Full validation without computation; an empty list means runnable.

    Subcommand-specific checks use ``subcommand`` or, when omitted, the
    ``[run] subcommand`` entry of the file.
    """
    if subcommand is None:
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error:
            pass
        subcommand = cp.get("run", "subcommand", fallback=None) if cp.has_section("run") else None
        if subcommand is not None and subcommand not in COMMANDS:
            return [f"[run] subcommand={subcommand!r} is not one of {', '.join(SUBCOMMANDS)}"]
    _, diags = load_config(path, subcommand)
    return diags


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _beta(alpha):
    return 1.0 - alpha


def _orientation(case, alpha, grid, V):
    """Fixed sign from the config, or the sign whose shift stays bounded under coarsening."""
    if case.orientation != "auto":
        return int(case.orientation), {}
    coarse = [tuple(max(16, n // 2) for n in cnt) for cnt in case.counts]
    if coarse == case.counts:
        coarse = [tuple(2 * n for n in cnt) for cnt in case.counts]
        Vc = F.assemble_V(case.grid(coarse), case.kernel(alpha))
        ch = S.select_orientation(V.A, grid.W, Vc.A, Vc.W)
    else:
        Vc = F.assemble_V(case.grid(coarse), case.kernel(alpha))
        ch = S.select_orientation(Vc.A, Vc.W, V.A, grid.W)
    return ch.orientation, ch.shifts


def _avals(case):
    a = case.a
    return np.array(a if len(a) == len(case.spec) else a * len(case.spec), float)


class Table:
    def __init__(self, columns):
        self.columns = list(columns)
        self.rows = []

    def add(self, **kw):
        self.rows.append([kw.get(c, "") for c in self.columns])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return format(v, ".17g")
    return str(v)


def write_csv(path, table):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(table.columns)
        for r in table.rows:
            w.writerow([_fmt(v) for v in r])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_symbol_check(cfg, ctx):
    t = Table(["case", "beta", "k", "rayleigh", "exact", "symbol", "ratio", "sign"])
    summary = {}
    for case in cfg.cases:
        for comp in case.spec.components:
            if comp.shape.kind != "circle":
                raise ConfigurationError("symbol-check needs circle components")
        if len(case.spec) != 1:
            raise ConfigurationError("symbol-check runs on a single circle")
        R = case.spec.components[0].shape.R
        grid = case.grid()
        u = grid.components[0].params[:, 0]
        for alpha in case.alphas:
            beta = _beta(alpha)
            t0 = time.perf_counter()
            V = F.assemble_V(grid, case.kernel(alpha))
            C = F.symbol_constant(case.spec.n, beta)
            ratios, signs = [], []
            for k in range(cfg.kmin, cfg.kmax + 1):
                phi = np.cos(k * u)
                lam = V.form(phi) / float(np.sum(grid.W * phi * phi))
                ex = F.circle_eigenvalue(k, beta) * R ** (-beta)
                sym = abs(C) * (k / R) ** beta
                ratios.append(abs(lam) / sym)
                signs.append(int(np.sign(lam)))
                t.add(case=case.name, beta=beta, k=k, rayleigh=lam, exact=ex, symbol=sym,
                      ratio=abs(lam) / sym, sign=int(np.sign(lam)))
            summary[f"{case.name}/beta={beta:g}"] = dict(
                ratio_min=min(ratios), ratio_max=max(ratios),
                measured_sign=int(signs[0]) if len(set(signs)) == 1 else 0,
                symbol_constant=C, asymmetry=V.asymmetry, seconds=time.perf_counter() - t0)
    return t, summary


def cmd_assemble(cfg, ctx):
    t = Table(["case", "beta", "quantity", "node", "value", "reference", "abs_diff", "rel_diff"])
    summary = {}
    for case in cfg.cases:
        grid = case.grid()
        for alpha in case.alphas:
            beta = _beta(alpha)
            key = f"{case.name}/beta={beta:g}"
            t0 = time.perf_counter()
            if case.kind == "laplace_hypersingular":
                Dm = F.assemble_D(grid, case.c)
                K = Dm.operator
                one = K @ np.ones(grid.size)
                scale = float(np.abs(K).sum(1).max())
                comp = grid.spec.components[0]
                th, ph = F._sph_angles(grid.points, comp.c, comp.shape.R)
                y1 = np.cos(th)
                q = Dm.form(y1) / float(np.sum(grid.W * y1 * y1))
                t.add(case=case.name, beta=beta, quantity="D1_inf", node=-1,
                      value=float(np.abs(one).max()), reference=0.0,
                      abs_diff=float(np.abs(one).max()), rel_diff=float(np.abs(one).max()) / scale)
                t.add(case=case.name, beta=beta, quantity="Y1_rayleigh", node=-1, value=q,
                      reference=2.0 / 3.0, abs_diff=abs(abs(q) - 2 / 3),
                      rel_diff=abs(abs(q) - 2 / 3) / (2 / 3))
                summary[key] = dict(D1_inf=float(np.abs(one).max()), operator_scale=scale,
                                    D1_ratio=float(np.abs(one).max()) / scale, y1_quotient=q,
                                    y1_rel_error=abs(abs(q) - 2 / 3) / (2 / 3),
                                    measured_sign=int(np.sign(q)), asymmetry=Dm.asymmetry,
                                    seconds=time.perf_counter() - t0)
                continue
            kern = case.kernel(alpha)
            half = kern.replace(c=0.5 * case.c)
            info = dict(h_split_max_rel=0.0, hvec_split_max=0.0, hvec_split_max_rel=0.0)
            for ci, cg in enumerate(grid.components):
                nodes = np.unique(np.linspace(0, cg.size - 1, case.sample_nodes).astype(int))
                for i in nodes:
                    u = cg.params[i]
                    a1 = F.h_terms(case.spec, kern, ci, u)
                    a2 = F.h_terms(case.spec, half, ci, u)
                    # h vanishes identically in some cases (the unit circle at
                    # beta = 1), so differences are relative to the split scale
                    hscale = max(abs(a1["h"]), abs(a1["T2"]))
                    rel = abs(a1["h"] - a2["h"]) / hscale
                    dv = float(np.abs(np.asarray(a1["hvec"]) - np.asarray(a2["hvec"])).max())
                    info["h_split_max_rel"] = max(info["h_split_max_rel"], rel)
                    dvr = dv / float(np.linalg.norm(a1["hvec"]))
                    info["hvec_split_max"] = max(info["hvec_split_max"], dv)
                    info["hvec_split_max_rel"] = max(info["hvec_split_max_rel"], dvr)
                    t.add(case=case.name, beta=beta, quantity="h_split", node=cg.offset + i,
                          value=a1["h"], reference=a2["h"], abs_diff=abs(a1["h"] - a2["h"]),
                          rel_diff=rel)
                    t.add(case=case.name, beta=beta, quantity="hvec_split", node=cg.offset + i,
                          value=float(np.linalg.norm(a1["hvec"])),
                          reference=float(np.linalg.norm(a2["hvec"])), abs_diff=dv,
                          rel_diff=dvr)
            if case.check_v1 or cfg.matrices:
                V = F.assemble_V(grid, kern)
                info["asymmetry"] = V.asymmetry
                if case.check_v1:
                    v1 = V.operator @ np.ones(grid.size)
                    h = np.array([F.h_scalar(case.spec, kern, ci, cg.params[i])
                                  for ci, cg in enumerate(grid.components)
                                  for i in range(cg.size)]) if len(grid.components) > 1 or \
                        case.spec.components[0].shape.orbit_axis is None else None
                    if h is None:
                        # cyclic symmetry: h is constant along the orbit axis
                        cg = grid.components[0]
                        sh = case.spec.components[0].shape
                        idx = np.arange(cg.size).reshape(cg.shape_counts)
                        reps = np.take(idx, 0, axis=sh.orbit_axis).ravel()
                        hr = np.array([F.h_scalar(case.spec, kern, 0, cg.params[i]) for i in reps])
                        h = F._expand_vec(hr, cg, sh)
                    err = np.abs(v1 - h)
                    hscale = max(float(np.abs(h).max()), kern.c ** -beta / (beta * kern.cm))
                    info["V1_minus_h_max"] = float(err.max())
                    info["V1_minus_h_rel"] = float(err.max() / hscale)
                    for i in np.unique(np.linspace(0, grid.size - 1, case.sample_nodes).astype(int)):
                        t.add(case=case.name, beta=beta, quantity="V1_minus_h", node=i,
                              value=v1[i], reference=h[i], abs_diff=err[i],
                              rel_diff=err[i] / hscale)
                if cfg.matrices:
                    p = Path(ctx["out"]) / f"V_{case.name}_beta{beta:g}.rzlb"
                    V.save(p)
                    info["matrix_file"] = str(p)
            info["seconds"] = time.perf_counter() - t0
            summary[key] = info
    return t, summary


def cmd_garding(cfg, ctx):
    t = Table(["case", "beta", "N", "orientation", "c0", "c1", "c2", "min_eig", "ratio"])
    summary = {}
    for case in cfg.cases:
        levels = case.N_levels
        grids = [case.grid(cnt) for cnt in levels]
        for alpha in case.alphas:
            beta = _beta(alpha)
            t0 = time.perf_counter()
            Vs = [F.assemble_V(g, case.kernel(alpha)) for g in grids]
            if case.orientation == "auto":
                ch = S.select_orientation(Vs[0].A, Vs[0].W, Vs[1].A, Vs[1].W)
                s, shifts = ch.orientation, ch.shifts
            else:
                s, shifts = int(case.orientation), {}
            Ss = [S.gram(g, beta / 2).S for g in grids]
            pr = S.garding_pencil(s * Vs[0].A, Vs[0].W, Ss[0], orientation=s)
            ratios = []
            for g, V, Sg in zip(grids, Vs, Ss):
                mn = S.pencil_min(s * V.A, V.W, Sg, pr.c1)
                ratios.append(mn / pr.c0)
                t.add(case=case.name, beta=beta, N=g.size, orientation=s, c0=pr.c0, c1=pr.c1,
                      c2=pr.c2, min_eig=mn, ratio=mn / pr.c0)
            summary[f"{case.name}/beta={beta:g}"] = dict(
                orientation=s, shifts=shifts, c0=pr.c0, c1=pr.c1, c2=pr.c2,
                min_ratio_refined=min(ratios[1:]), seconds=time.perf_counter() - t0)
    return t, summary


def _problem_arrays(case, grid):
    return case.f.on_grid(grid), case.g.on_grid(grid), _avals(case)


def cmd_gauss(cfg, ctx):
    if cfg.oracle_instances > 0:
        return _gauss_oracle(cfg, ctx)
    t = Table(["case", "beta", "node", "component", "sigma", "active"])
    summary = {}
    for case in cfg.cases:
        grid = case.grid()
        prob = G.Problem.from_grid(grid)
        f, g, a = _problem_arrays(case, grid)
        for alpha in case.alphas:
            beta = _beta(alpha)
            V = F.assemble_V(grid, case.kernel(alpha))
            s, shifts = _orientation(case, alpha, grid, V)
            rep = G.solve_gauss(s * V.A, prob, f, g, a, max_iter=cfg.max_iter, tol=cfg.tol)
            rep.orientation = s
            for i in range(grid.size):
                t.add(case=case.name, beta=beta, node=i, component=int(grid.comp_index[i]),
                      sigma=rep.sigma[i], active=bool(rep.active[i]))
            summary[f"{case.name}/beta={beta:g}"] = dict(report=rep.summary(), shifts=shifts)
    return t, summary


def _gauss_oracle(cfg, ctx):
    t = Table(["instance", "max_abs_diff", "active_count", "kkt_residual", "feasibility"])
    rngs = D.rng_streams(cfg.seed, cfg.oracle_instances)
    worst = 0.0
    for k, rng in enumerate(rngs):
        # alternate mild and strong fields so both interior and boundary optima occur
        A, prob, f, g, a = G.random_instance(rng, cfg.oracle_size, 0.3 if k % 2 else 2.0)
        rep = G.solve_gauss(A, prob, f, g, a, max_iter=cfg.max_iter, tol=cfg.tol)
        ref = G.enumerate_cone(A, prob.W * f, prob.constraint_matrix(g), a)
        diff = float(np.abs(rep.sigma - ref).max())
        worst = max(worst, diff)
        t.add(instance=k, max_abs_diff=diff, active_count=int(rep.active.sum()),
              kkt_residual=rep.kkt_residual, feasibility=rep.feasibility)
    return t, {"oracle": dict(instances=cfg.oracle_instances, size=cfg.oracle_size,
                              max_abs_diff=worst)}


def cmd_expansion(cfg, ctx):
    t = None
    summary = {}
    for case in cfg.cases:
        grid = case.grid()
        prob = G.Problem.from_grid(grid)
        f, g, a = _problem_arrays(case, grid)
        for alpha in case.alphas:
            beta = _beta(alpha)
            t0 = time.perf_counter()
            V = F.assemble_V(grid, case.kernel(alpha))
            s, shifts = _orientation(case, alpha, grid, V)
            res = G.expansion_check(prob, s * V.A, f, g, a, case.epsilons, orientation=s)
            if t is None:
                t = Table(["case", "beta"] + res.columns)
            for row in res.rows:
                t.add(case=case.name, beta=beta, **dict(zip(res.columns, row)))
            ex = res.expansion
            C = prob.constraint_matrix(g)
            summary[f"{case.name}/beta={beta:g}"] = dict(
                orientation=s, shifts=shifts, **res.fits,
                constraint_sigma0=float(np.abs(C @ (prob.sign_vector() * ex.sigma0) - a).max()),
                constraint_sigma1=float(np.abs(C @ (prob.sign_vector() * ex.sigma1)).max()),
                sigma2_hnorm_range=[float(res.column("hnorm_sigma2_implied").min()),
                                    float(res.column("hnorm_sigma2_implied").max())],
                seconds=time.perf_counter() - t0)
    return t, summary


def cmd_punched_sweep(cfg, ctx):
    nl = max(len(c.spec) for c in cfg.cases)
    cols = (["case", "beta", "delta", "epsilon", "J_delta", "J_scaled", "blowup_ratio",
             "l2_dist_sigma0", "rel_dist_sigma0", "l2_dist_first_order"]
            + [f"lambda_{k}" for k in range(nl)]
            + ["active_count", "compensator_phi", "compensator_ratio", "reduced_min_eig",
               "is_minimizer"])
    t = Table(cols)
    summary = {}
    for case in cfg.cases:
        grid = case.grid()
        prob = G.Problem.from_grid(grid)
        f, g, a = _problem_arrays(case, grid)
        phi = case.phi.on_grid(grid) if case.phi is not None else None
        periodic = all(c.shape.kind != "sphere" for c in case.spec.components)
        for alpha in case.alphas:
            beta = _beta(alpha)
            t0 = time.perf_counter()
            kern = case.kernel(alpha)
            V = F.assemble_V(grid, kern)
            s0, _ = G.sigma0_lambda0(prob, g, a)
            n0 = prob.ip(s0, s0)
            hphi = S.gram(grid, beta / 2).norm2(phi) if (phi is not None and periodic) else None
            rows = []
            for d in sorted(case.deltas):
                P, Pp, Pn = F.assemble_P(grid, kern, d, V=V, allow_subgrid=case.allow_subgrid)
                rep = G.solve_punched(grid, kern, d, f, g, a, Pn=Pn)
                eps = rep.eps
                Gp = F.compensator_gradient(Pp)
                Aop = (V.A - 0.5 * Gp.A) / grid.W[:, None]
                s1, _ = G.sigma1_lambda1(prob, g, a, f, Aop)
                comp = float(phi @ Pp.A @ phi) if phi is not None else float("nan")
                row = dict(case=case.name, beta=beta, delta=d, epsilon=eps, J_delta=rep.J_delta,
                           J_scaled=rep.J_delta * d**beta,
                           blowup_ratio=rep.J_delta * d**beta * beta * kern.cm / n0,
                           l2_dist_sigma0=prob.l2(rep.sigma - s0),
                           rel_dist_sigma0=prob.l2(rep.sigma - s0) / np.sqrt(n0),
                           l2_dist_first_order=prob.l2(rep.sigma - s0 - eps * s1),
                           active_count=int(rep.active.sum()), compensator_phi=comp,
                           compensator_ratio=abs(comp) / hphi if hphi else float("nan"),
                           reduced_min_eig=rep.reduced_min_eig, is_minimizer=rep.is_minimizer)
                for k, lam in enumerate(rep.lam):
                    row[f"lambda_{k}"] = lam
                t.add(**row)
                rows.append(row)
            ds = np.array([r["delta"] for r in rows])
            J = np.array([r["J_delta"] for r in rows])
            ratio = np.array([r["blowup_ratio"] for r in rows])
            info = dict(
                blowup_ratio_smallest=float(ratio[0]),
                blowup_monotone=bool(np.all(np.diff(np.abs(ratio - 1)) >= 0)),
                J_monotone=bool(np.all(J[:-1] >= J[1:])),
                rel_dist_smallest=float(rows[0]["rel_dist_sigma0"]),
                any_minimizer=bool(any(r["is_minimizer"] for r in rows)),
                seconds=time.perf_counter() - t0)
            if len(rows) >= 3:
                info["dist_decay_exponent"] = G.fit_slope(ds, [r["l2_dist_sigma0"] for r in rows])
                if phi is not None:
                    info["compensator_rate"] = G.fit_slope(ds, [abs(r["compensator_phi"])
                                                                for r in rows])
                    cr = [r["compensator_ratio"] for r in rows]
                    info["compensator_ratio_max"] = float(np.nanmax(cr)) if periodic else None
            summary[f"{case.name}/beta={beta:g}"] = info
    return t, summary


def cmd_discrete_sweep(cfg, ctx):
    t = Table(["N", "s", "energy", "scaled_energy", "gap", "restart_spread", "seed"])
    summary = {}
    for case in cfg.cases:
        comp = case.spec.components[cfg.component]
        for s in cfg.s_list:
            t0 = time.perf_counter()
            confs = [D.optimize_points(case.spec, cfg.component, N, s, cfg.seed, cfg.restarts,
                                       cfg.max_iter, threads=ctx["threads"]) for N in cfg.N_list]
            res = D.scaling_fit(case.spec, cfg.component, s, cfg.N_list, cfg.seed, cfg.restarts,
                                configs=confs)
            for r in res.rows:
                t.add(**dict(zip(res.columns, r)))
            info = dict(res.fits, case=case.name, seconds=time.perf_counter() - t0)
            if comp.shape.kind == "circle":
                R = comp.shape.R
                # equally spaced points are optimal on a circle; their scaled
                # energy tends to 2 zeta(s) / (2 pi R)^s
                oracle = 2 * zeta(s) / (2 * np.pi * R) ** s
                info["oracle_limit"] = oracle
                info["limit_rel_error"] = abs(res.fits["limit"] - oracle) / oracle
                devs = []
                for c in confs:
                    u = np.sort(c.params[:, 0])
                    du = np.diff(np.r_[u, u[0] + 2 * np.pi])
                    devs.append(float(np.abs(du - 2 * np.pi / len(u)).max() / (2 * np.pi / len(u))))
                info["spacing_rel_dev_max"] = max(devs)
            info["gap_max"] = float(res.column("gap").max())
            summary[f"{case.name}/s={s:g}"] = info
    return t, summary


def cmd_martensen(cfg, ctx):
    t = Table(["case", "check", "label", "rho", "expected", "numeric", "abs_diff", "tolerance",
               "asserted", "passed"])
    summary = {}
    for case in cfg.cases:
        spec = case.spec
        sh = spec.components[0].shape
        worst = {}

        def add(check, label, rho, exp, num, tol, asserted):
            d = abs(exp - num)
            ok = (d <= tol) if asserted else True
            worst[check] = max(worst.get(check, 0.0), d) if asserted else worst.get(check, 0.0)
            t.add(case=case.name, check=check, label=label, rho=rho, expected=exp, numeric=num,
                  abs_diff=d, tolerance=tol if asserted else float("nan"), asserted=asserted,
                  passed=ok)
        if sh.kind == "circle":
            rho = np.linspace(0.05, 1.5, 8) * sh.R
            ray = M.ray_solve(spec, 0, [0.0], [1.0 / sh.R], 1.6 * sh.R, samples=rho)
            for r, u in zip(rho, ray.u[:, 0]):
                add("circle_ray", "u(rho)", r, 2 * np.arcsin(r / (2 * sh.R)), u, 1e-8, True)
        if sh.kind == "sphere":
            u0 = np.array([1.0, 0.5])
            th = np.array([1.0, 0.3])
            th = th / np.sqrt(th[0] ** 2 + np.sin(u0[0]) ** 2 * th[1] ** 2) / sh.R
            for r in (0.1, 0.3, 0.5, 1.0):
                jac = M.jacobian_numeric(spec, 0, u0, th, r * sh.R)
                add("sphere_jacobian", "J(rho)", r * sh.R, r * sh.R, jac, 1e-6, True)
        u0 = np.asarray(case.u0[:sh.m], float)
        for row in M.martensen_table(spec, 0, u0):
            add("series", row["order"], float("nan"), row["series"], row["numeric"],
                1e-6, bool(row["asserted"]))
        summary[case.name] = dict(max_asserted_diff=worst,
                                  all_passed=all(r[-1] for r in t.rows if r[0] == case.name))
    return t, summary


COMMANDS = {
    "symbol-check": cmd_symbol_check,
    "assemble": cmd_assemble,
    "garding": cmd_garding,
    "gauss": cmd_gauss,
    "punched-sweep": cmd_punched_sweep,
    "expansion": cmd_expansion,
    "discrete-sweep": cmd_discrete_sweep,
    "martensen": cmd_martensen,
}


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def run(subcommand, config, out=None, seed=None, threads=1):
    """Execute one subcommand; returns ``(exit_code, report_dict or None)``."""
    if subcommand not in COMMANDS:
        print(f"unknown subcommand {subcommand!r}", file=sys.stderr)
        return EXIT_VALIDATION, None
    cfg, diags = load_config(config, subcommand, seed=seed, out=out)
    if diags:
        for d in diags:
            print(f"error: {d}", file=sys.stderr)
        return EXIT_VALIDATION, None
    out_dir = Path(cfg.out)
    report = dict(schema_version=SCHEMA_VERSION, subcommand=subcommand, config=cfg.raw,
                  config_path=cfg.path, seed=cfg.seed,
                  versions=dict(rieszlab=__version__, numpy=np.__version__,
                                scipy=scipy.__version__, python=platform.python_version()))
    t0 = time.perf_counter()
    ctx = dict(out=str(out_dir), threads=max(1, int(threads)))
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        table, payload = COMMANDS[subcommand](cfg, ctx)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION, None
    except (F.NumericalError, linalg.LinAlgError, FloatingPointError) as exc:
        report.update(status="numeric_failure", error=str(exc),
                      timings=dict(total_seconds=time.perf_counter() - t0))
        _write_report(out_dir, report)
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC, report
    write_csv(out_dir / f"{subcommand}.csv", table)
    orient = {k: v.get("orientation") for k, v in payload.items()
              if isinstance(v, dict) and "orientation" in v}
    report.update(status="ok", orientation=orient, result=payload,
                  timings=dict(total_seconds=time.perf_counter() - t0),
                  csv=str(out_dir / f"{subcommand}.csv"))
    _write_report(out_dir, report)
    return EXIT_OK, report


def _write_report(out_dir, report):
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)


def bundled_config(name):
    """Path of a configuration shipped with the package."""
    return Path(__file__).parent / "configs" / name


def _resolve_config(arg):
    """A path on disk, or else the name of a bundled config (with or without ``.ini``)."""
    if Path(arg).exists():
        return arg
    cand = bundled_config(arg if arg.endswith(".ini") else f"{arg}.ini")
    return str(cand) if cand.exists() else arg


def main(argv=None):
    p = argparse.ArgumentParser(prog="rieszlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS + ("validate",):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        if name != "validate":
            sp.add_argument("--out")
            sp.add_argument("--seed", type=int)
            sp.add_argument("--threads", type=int, default=1)
        else:
            sp.add_argument("--for", dest="target", choices=SUBCOMMANDS)
    args = p.parse_args(argv)
    args.config = _resolve_config(args.config)
    if args.subcommand == "validate":
        diags = validate(args.config, args.target)
        for d in diags:
            print(d)
        if not diags:
            print("ok")
        return EXIT_VALIDATION if diags else EXIT_OK
    code, _ = run(args.subcommand, args.config, args.out, args.seed, args.threads)
    return code


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end acceptance checks, each driven by one bundled configuration.

Run with ``pytest tests/test_acceptance.py -v`` or directly as a script.
A full pass takes about six minutes, half of it in the torus punched sweep.
"""
import csv
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

from rieszlab import cli

CONFIGS = Path(cli.__file__).parent / "configs"
RESULTS = {}
_RUNS = {}
_WORK = Path(tempfile.mkdtemp(prefix="rieszlab-acceptance-"))


def run_config(name, subcommand):
    """Run a bundled config once per session and return (report, csv rows)."""
    if name not in _RUNS:
        out = _WORK / name
        code, report = cli.run(subcommand, CONFIGS / f"{name}.ini", out=str(out))
        assert code == 0, f"{name} exited with {code}"
        with open(out / f"{subcommand}.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        _RUNS[name] = report, rows
    return _RUNS[name]


def record(label, checks):
    """Store one summary line and fail on the first broken check.

    ``checks`` maps a short description to ``(ok, detail)``.
    """
    bad = [f"{k}: {d}" for k, (ok, d) in checks.items() if not ok]
    good = "; ".join(f"{k}: {d}" for k, (ok, d) in checks.items())
    RESULTS[label] = f"{'PASS' if not bad else 'FAIL'}  {label}  [{good}]"
    print(RESULTS[label])
    assert not bad, "; ".join(bad)


def _fmt(x):
    return f"{x:.4g}"


def test_symbol_law():
    rep, _ = run_config("symbol_law", "symbol-check")
    res = rep["result"]
    checks = {}
    for key, v in res.items():
        checks[f"{key} ratio"] = (0.95 <= v["ratio_min"] and v["ratio_max"] <= 1.05,
                                  f"[{_fmt(v['ratio_min'])}, {_fmt(v['ratio_max'])}]")
        checks[f"{key} time"] = (v["seconds"] <= 60, f"{v['seconds']:.1f}s")
        checks[f"{key} sign"] = (v["measured_sign"] in (-1, 1), str(v["measured_sign"]))
    record("symbol law on the circle", checks)


def test_garding_pencil():
    rep, _ = run_config("garding_pencil", "garding")
    checks = {f"{k} min/c0": (v["min_ratio_refined"] >= 0.8, _fmt(v["min_ratio_refined"]))
              for k, v in rep["result"].items()}
    total = rep["timings"]["total_seconds"]
    checks["time"] = (total <= 120, f"{total:.1f}s")
    record("Garding pencil under refinement", checks)


def test_splitting_radius_invariance():
    rep, _ = run_config("splitting_invariance", "assemble")
    checks = {}
    for k, v in rep["result"].items():
        checks[f"{k} h"] = (v["h_split_max_rel"] <= 1e-6, _fmt(v["h_split_max_rel"]))
        checks[f"{k} hvec"] = (v["hvec_split_max_rel"] <= 1e-6, _fmt(v["hvec_split_max_rel"]))
        if k.startswith("circle"):
            checks[f"{k} V1-h"] = (v["V1_minus_h_max"] <= 1e-8, _fmt(v["V1_minus_h_max"]))
    assert sum(k.startswith("circle") for k in rep["result"]) == 3
    assert sum(k.startswith("torus") for k in rep["result"]) == 3
    record("splitting radius invariance", checks)


def test_perturbed_expansion():
    rep, _ = run_config("perturbed_expansion", "expansion")
    checks = {}
    for k, v in rep["result"].items():
        checks[f"{k} first"] = (abs(v["slope_first"] - 1) <= 0.1, _fmt(v["slope_first"]))
        checks[f"{k} second"] = (v["slope_second"] >= 1.8, _fmt(v["slope_second"]))
    total = rep["timings"]["total_seconds"]
    checks["time"] = (total <= 120, f"{total:.1f}s")
    record("perturbed problem expansion rates", checks)


def test_punched_blowup():
    rep, _ = run_config("punched_blowup", "punched-sweep")
    checks = {}
    for k, v in rep["result"].items():
        r = v["blowup_ratio_smallest"]
        checks[f"{k} ratio"] = (abs(r - 1) <= 0.1, _fmt(r))
        checks[f"{k} monotone"] = (v["blowup_monotone"], str(v["blowup_monotone"]))
    record("punched energy blow-up rate", checks)


def test_punched_monotonicity():
    rep, rows = run_config("punched_monotonicity", "punched-sweep")
    checks = {}
    for k, v in rep["result"].items():
        case, beta = k.split("/beta=")
        sel = [r for r in rows if r["case"] == case and float(r["beta"]) == float(beta)]
        sel.sort(key=lambda r: float(r["delta"]))
        J = np.array([float(r["J_delta"]) for r in sel])
        ok = bool(np.all(J[:-1] >= J[1:]))
        checks[k] = (ok and v["J_monotone"], f"{len(J)} deltas, monotone={ok}")
    record("punched energy monotone in delta", checks)


def test_compensator_decay():
    rep, rows = run_config("compensator_decay", "punched-sweep")
    checks = {}
    for k, v in rep["result"].items():
        beta = float(k.split("=")[1])
        rate = v["compensator_rate"]
        checks[f"{k} rate"] = (abs(rate - (2 - beta)) <= 0.3, f"{_fmt(rate)} vs {2 - beta:g}")
        sel = sorted((r for r in rows if float(r["beta"]) == beta), key=lambda r: float(r["delta"]))
        cr = np.array([float(r["compensator_ratio"]) for r in sel])
        # bounded: finite and not growing as delta shrinks
        ok = bool(np.all(np.isfinite(cr)) and cr[0] <= cr[-1])
        checks[f"{k} ratio"] = (ok, f"max {_fmt(cr.max())}")
    record("compensator decay", checks)


def test_constant_limit():
    rep, _ = run_config("constant_limit", "punched-sweep")
    res = rep["result"]
    checks = {}
    for k, v in res.items():
        checks[f"{k} rel dist"] = (v["rel_dist_smallest"] <= 0.05, _fmt(v["rel_dist_smallest"]))
        if k.startswith("circle"):
            beta = float(k.split("=")[1])
            e = v["dist_decay_exponent"]
            checks[f"{k} exponent"] = (abs(e - beta) <= 0.15, _fmt(e))
        if k.startswith("torus"):
            checks[f"{k} time"] = (v["seconds"] <= 600, f"{v['seconds']:.0f}s")
    assert any(k.startswith("torus") for k in res) and any(k.startswith("circle") for k in res)
    record("constant density limit", checks)


def test_martensen_coordinates():
    rep, rows = run_config("martensen_rays", "martensen")
    tol = dict(circle_ray=1e-8, sphere_jacobian=1e-6, series=1e-6)
    checks = {}
    for case, v in rep["result"].items():
        for check, d in v["max_asserted_diff"].items():
            checks[f"{case} {check}"] = (d <= tol[check], _fmt(d))
    assert {"circle_ray", "sphere_jacobian"} <= {c.split()[1] for c in checks}
    report_only = sum(r["asserted"] == "false" for r in rows)
    checks["report-only rows"] = (report_only > 0, str(report_only))
    record("polar chord coordinates", checks)


def test_hypersingular_sphere():
    rep, _ = run_config("hypersingular_sphere", "assemble")
    v = next(iter(rep["result"].values()))
    record("double-layer hypersingular operator on the sphere", {
        "D1 ratio": (v["D1_ratio"] <= 0.05, _fmt(v["D1_ratio"])),
        "Y1": (v["y1_rel_error"] <= 0.1, f"{_fmt(v['y1_quotient'])} (sign {v['measured_sign']})"),
    })


def test_cone_solver_oracle():
    rep, _ = run_config("cone_oracle", "gauss")
    o = rep["result"]["oracle"]
    record("cone solver against enumeration", {
        "instances": (o["instances"] == 50 and o["size"] == 8, f"{o['instances']}x{o['size']}"),
        "max diff": (o["max_abs_diff"] <= 1e-8, _fmt(o["max_abs_diff"])),
    })


def test_discrete_bridge():
    rep, _ = run_config("discrete_bridge", "discrete-sweep")
    checks = {}
    for k, v in rep["result"].items():
        checks[f"{k} limit"] = (v["limit_rel_error"] <= 0.02, _fmt(v["limit_rel_error"]))
        checks[f"{k} spacing"] = (v["spacing_rel_dev_max"] <= 1e-3, _fmt(v["spacing_rel_dev_max"]))
        checks[f"{k} gap"] = (v["gap_max"] <= 1e-10, _fmt(v["gap_max"]))
    record("discrete energy scaling limit", checks)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))

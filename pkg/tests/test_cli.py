import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rieszlab import cli
from rieszlab.fpquad import OperatorMatrix
from rieszlab.geometry import ConfigurationError

CONFIG_DIR = Path(cli.__file__).parent / "configs"

SMALL = """
[manifold]
component.0 = circle R=1

[grid]
N = {N}

[kernel]
alpha = 0
c = 0.5

[problem]
f = cosine-band(k=2)
g = trig-polynomial(c0=1, c1=0.3)
a = {a}

[sweep]
delta = {delta}
epsilon = {eps}

[output]
dir = {out}
"""


def write(tmp_path, N=128, a="1", delta="geom(0.2, 0.4, 3)", eps="geom(1e-3, 1e-2, 4)",
          extra=""):
    p = tmp_path / "run.ini"
    p.write_text(SMALL.format(N=N, a=a, delta=delta, eps=eps, out=tmp_path / "out") + extra)
    return p


def test_bundled_configs_validate():
    files = sorted(CONFIG_DIR.glob("*.ini"))
    assert len(files) == 12
    for f in files:
        assert cli.validate(f) == [], f.name


def test_expression_catalog():
    e = cli.parse_expression("cosine-band(k=3, amplitude=2, offset=1)")
    U = np.array([[0.0], [np.pi / 3]])
    assert np.allclose(e(U, (2 * np.pi,)), [3.0, 1.0 + 2 * np.cos(np.pi)])
    t = cli.parse_expression("trig-polynomial(c0=1, c2=0.5, s1=2)")
    assert np.allclose(t(U, (2 * np.pi,)), 1 + 0.5 * np.cos(2 * U[:, 0]) + 2 * np.sin(U[:, 0]))
    b = cli.parse_expression("gaussian-bump-on-chart(u0=0.1, v0=6.2, width=0.3, height=2)")
    V = np.array([[0.1, 6.2], [0.1, 6.2 - 2 * np.pi]])
    assert np.allclose(b(V, (2 * np.pi, 2 * np.pi)), 2.0)
    assert cli.parse_expression("constant(value=4)")(U, (2 * np.pi,)).tolist() == [4.0, 4.0]


def test_unknown_expression_lists_catalog():
    with pytest.raises(ConfigurationError) as exc:
        cli.parse_expression("sawtooth(k=1)")
    for name in cli.CATALOG:
        assert name in str(exc.value)


def test_unknown_parameter_rejected():
    with pytest.raises(ConfigurationError, match="no parameter"):
        cli.parse_expression("constant(level=1)")


@settings(max_examples=30, deadline=None)
@given(a=st.floats(1e-3, 1e3), b=st.floats(1e-3, 1e3), n=st.integers(2, 20))
def test_sweep_value_syntax(a, b, n):
    vals = cli.parse_values(f"geom({a!r}, {b!r}, {n})", "x")
    assert len(vals) == n
    assert vals[0] == pytest.approx(a) and vals[-1] == pytest.approx(b)
    assert cli.parse_values(f"{a!r}, {b!r}", "x") == [a, b]


def test_validate_names_delta_and_grid_spacing(tmp_path):
    p = write(tmp_path, N=64, delta="0.05")
    diags = cli.validate(p, "punched-sweep")
    msg = [d for d in diags if "delta" in d]
    assert msg and "4*h_grid=" in msg[0] and "0.05" in msg[0]


def test_validate_unknown_expression(tmp_path):
    p = write(tmp_path, extra="\n[case.x]\ncomponent.0 = circle R=1\nf = wave(k=1)\n")
    diags = cli.validate(p, "punched-sweep")
    assert any("catalog" in d and "cosine-band" in d for d in diags)


def test_negative_constraint_exits_2_without_files(tmp_path):
    p = write(tmp_path, a="-1")
    code, rep = cli.run("punched-sweep", p)
    assert code == 2 and rep is None
    assert not (tmp_path / "out").exists()


def test_expansion_with_three_points_exits_2(tmp_path, capsys):
    p = write(tmp_path, eps="1e-3, 1e-2, 1e-1")
    assert cli.main(["expansion", "--config", str(p)]) == 2
    assert "fewer than 4 sweep points" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_numeric_failure_exits_3_with_report(tmp_path):
    p = write(tmp_path, eps="geom(1, 10, 4)", extra="\n[case.fixed]\ncomponent.0 = circle R=1\n"
              "orientation = 1\n")
    code, rep = cli.run("expansion", p)
    assert code == 3
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["status"] == "numeric_failure"
    assert "epsilon too large" in report["error"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_punched_sweep_outputs_and_determinism(tmp_path):
    p = write(tmp_path)
    code, rep = cli.run("punched-sweep", p, out=str(tmp_path / "a"))
    assert code == 0
    rows = read_csv(tmp_path / "a" / "punched-sweep.csv")
    head = rows[0]
    for col in ("delta", "epsilon", "J_delta", "l2_dist_sigma0"):
        assert col in head
    assert len(rows) == 4
    # 17 significant digits round-trip exactly
    j = head.index("J_delta")
    assert all(repr(float(r[j])) == repr(float(np.float64(r[j]))) for r in rows[1:])
    cli.run("punched-sweep", p, out=str(tmp_path / "b"))
    assert rows == read_csv(tmp_path / "b" / "punched-sweep.csv")
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["schema_version"] == cli.SCHEMA_VERSION
    assert report["orientation"] == {} or isinstance(report["orientation"], dict)
    assert "numpy" in report["versions"]
    assert report["config"]["manifold"]["component.0"] == "circle R=1"


def test_seed_override_and_discrete_sweep(tmp_path):
    p = tmp_path / "d.ini"
    p.write_text("[manifold]\ncomponent.0 = circle R=1\n[sweep]\nN = 8, 10, 12, 14\ns = 2\n"
                 "[solver]\nrestarts = 1\n")
    code, rep = cli.run("discrete-sweep", p, out=str(tmp_path / "o"), seed=99)
    assert code == 0
    rows = read_csv(tmp_path / "o" / "discrete-sweep.csv")
    assert rows[0] == ["N", "s", "energy", "scaled_energy", "gap", "restart_spread", "seed"]
    assert {r[-1] for r in rows[1:]} == {"99"}
    assert rep["result"]["main/s=2"]["limit_rel_error"] < 1e-3


def test_gauss_oracle_mode(tmp_path):
    p = tmp_path / "g.ini"
    p.write_text("[manifold]\ncomponent.0 = circle R=1\n[grid]\nN = 16\n"
                 "[oracle]\ninstances = 4\nsize = 6\n")
    code, rep = cli.run("gauss", p, out=str(tmp_path / "o"))
    assert code == 0
    assert rep["result"]["oracle"]["max_abs_diff"] < 1e-8


def test_module_entry_point(tmp_path):
    p = write(tmp_path)
    r = subprocess.run([sys.executable, "-m", "rieszlab", "validate", "--config", str(p),
                        "--for", "punched-sweep"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == "ok"


def test_matrix_dump_round_trips(tmp_path):
    p = tmp_path / "m.ini"
    p.write_text(f"[manifold]\ncomponent.0 = circle R=1\n[grid]\nN = 64\n[kernel]\nalpha = 0\n"
                 f"c = 0.5\n[output]\ndir = {tmp_path / 'out'}\nmatrices = yes\n")
    code, rep = cli.run("assemble", p)
    assert code == 0
    files = list((tmp_path / "out").glob("*.rzlb"))
    assert len(files) == 1
    head, A = OperatorMatrix.load(files[0])
    assert head["N"] == 64 and A.shape == (64, 64)
    assert np.allclose(A, A.T, atol=1e-12)

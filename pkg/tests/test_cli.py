import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from thermoformalism import cli
from thermoformalism.errors import ConfigError

PL_CFG = {"map": {"kind": "piecewise_linear", "slopes": [2, 3]}, "potential": {"kind": "geometric"},
          "scheme": "collocation", "N": [32, 64], "t": {"min": -3.0, "max": 3.0, "steps": 13}}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_config_round_trip():
    text = json.dumps({**PL_CFG, "oracle": {"preimage_n": [8]}, "workers": 2, "outputs": {"gnuplot": True}})
    cfg = cli.parse_config(text)
    again = cli.parse_config(json.dumps(cfg.to_dict()))
    assert again.to_dict() == cfg.to_dict()
    assert again.N == [32, 64] and again.workers == 2
    np.testing.assert_allclose(again.t_grid(), np.linspace(-3, 3, 13))


def test_config_defaults_and_explicit_values():
    cfg = cli.parse_config(json.dumps({"map": {"kind": "doubling"}, "potential": {"kind": "constant", "value": 1},
                                       "N": 32, "t": {"values": [-1, 0, 2.5]}}))
    assert cfg.scheme == "collocation" and cfg.N == [32]
    np.testing.assert_array_equal(cfg.t_grid(), [-1.0, 0.0, 2.5])


@pytest.mark.parametrize("mutate,fragment", [
    (lambda d: d.pop("map"), "config: missing field 'map'"),
    (lambda d: d.update(N=[64, 32]), "config.N: ladder must be strictly increasing"),
    (lambda d: d.update(N=[4]), "config.N"),
    (lambda d: d.update(t={"min": 1.0, "max": 0.0}), "config.t: empty range"),
    (lambda d: d.update(scheme="spectral"), "config.scheme"),
    (lambda d: d["map"].update(slopes=[2, "x"]), "config.map.slopes[1]"),
    (lambda d: d["map"].update(slopes=[0.5, 3]), "config.map.slopes[0]"),
    (lambda d: d.update(potential={"kind": "trig_poly", "terms": [[1, 0.5]]}), "config.potential.terms[0]"),
    (lambda d: d.update(map={"kind": "skew_product", "base": {"kind": "doubling"}, "fiber": {}}),
     "config.map.fiber: missing field 'profile'"),
    (lambda d: d.update(bogus=1), "unknown field"),
    (lambda d: d.update(workers=0), "config.workers"),
])
def test_config_errors_name_the_field(mutate, fragment):
    d = json.loads(json.dumps(PL_CFG))
    mutate(d)
    with pytest.raises(ConfigError) as exc:
        cli.parse_config(json.dumps(d))
    assert fragment in str(exc.value)


def test_config_syntax_error_reports_position():
    with pytest.raises(ConfigError) as exc:
        cli.parse_config('{\n  "map": {"kind": "doubling"},\n  "potential": oops\n}')
    assert "line 3" in str(exc.value) and "column" in str(exc.value)


def test_csv_formatting():
    assert cli.fmt(0.1) == "1.0000000000000001e-01"
    assert cli.fmt(True) == "true" and cli.fmt(np.nan) == "nan" and cli.fmt(-np.inf) == "-inf"
    text = cli.csv_text(["a", "b"], [(1.0, 2.5)])
    assert text == "a,b\n1.0000000000000000e+00,2.5000000000000000e+00\n"
    assert float(cli.fmt(np.pi)) == np.pi


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "out.csv"
    cli.atomic_write(target, "old\n")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        cli.atomic_write(target, "new\n")
    assert target.read_text() == "old\n"
    assert [p.name for p in tmp_path.iterdir()] == ["out.csv"]


def test_pressure_sweep_constant_potential(tmp_path):
    cfg = {"map": {"kind": "doubling"}, "potential": {"kind": "constant", "value": 1.0}, "N": [32],
           "t": {"min": -2.0, "max": 2.0, "steps": 9}, "outputs": {"gnuplot": True}}
    rc = cli.run(["pressure-sweep", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path / "o")])
    assert rc == 0
    rows = read_csv(tmp_path / "o" / "pressure_collocation_N32.csv")
    t = np.array([float(r["t"]) for r in rows])
    P = np.array([float(r["P"]) for r in rows])
    np.testing.assert_allclose(P, np.log(2) + t, atol=1e-12)
    assert (tmp_path / "o" / "pressure_collocation_N32.gp").exists()
    summary = json.loads((tmp_path / "o" / "pressure_summary.json").read_text())
    assert summary["curves"][0]["checks"]["convex"]


def test_oracle_check_pl_closed_form(tmp_path):
    cfg = {**PL_CFG, "N": [64], "oracle": {"preimage_n": [10], "periodic_n": [8], "x0": [0.3], "x0_random": 2,
                                           "estimator": "ratio"}}
    rc = cli.run(["oracle-check", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path), "--seed", "7"])
    assert rc == 0
    res = json.loads((tmp_path / "oracle.json").read_text())["oracle"]
    assert res["closed_form"]["collocation_N64"] < 1e-6
    assert len(res["x0"]) == 3
    P = res["operator_pressure"]
    assert max(abs(v - P) for v in res["preimage_sum"]["10"]) < 1e-6


def test_equilibrium_and_report(tmp_path):
    cfg = {**PL_CFG, "N": [64], "equilibrium": {"t": 1.0, "l_max": 2}}
    path = write_cfg(tmp_path, cfg)
    assert cli.run(["equilibrium", "--config", path, "--out", str(tmp_path)]) == 0
    eq = json.loads((tmp_path / "equilibrium.json").read_text())
    assert eq["certificate"]["certified"] and eq["certificate"]["l"] == 1
    assert eq["certificate"]["value"] == pytest.approx(0.6 * np.log(2) + 0.4 * np.log(3), abs=1e-8)
    rows = read_csv(tmp_path / "equilibrium.csv")
    assert sum(float(r["mu"]) for r in rows) == pytest.approx(1.0, abs=1e-12)
    assert cli.run(["report", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert "equilibrium" in rep["summaries"] and "equilibrium.csv" in rep["artifacts"]


def test_skew_analysis_and_flatten_demo(tmp_path):
    skew = {"kind": "skew_product", "base": {"kind": "doubling"},
            "fiber": {"profile": {"kind": "smooth_intermittent"}, "perturbation": 0.1}}
    cfg = {"map": skew, "potential": {"kind": "constant", "value": 0.0}, "scheme": "ulam", "N": [16],
           "t": {"min": -1.0, "max": 1.0, "steps": 3}}
    assert cli.run(["skew-analysis", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "skew.json").read_text())
    assert res["class_tag"] == "TM2" and res["subsystem_ok"] and set(res["labels"]) == {"interior"}

    cfg = {"map": {"kind": "doubling"}, "potential": {"kind": "trig_poly", "terms": [[1, 1.0, 0.0]]},
           "scheme": "ulam", "N": [256], "flatten": {"eps": 0.0625, "k_min": 2, "k_max": 6, "t": [-1, 0, 1]}}
    assert cli.run(["flatten-demo", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "flatten.json").read_text())
    assert res["monotone"] and res["gap_ok"]


def test_exit_code_one_on_bad_config(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"map": {"kind": "tent"}, "potential": {"kind": "constant", "value": 0}}')
    assert cli.run(["pressure-sweep", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "config.map.kind" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()
    assert cli.run(["pressure-sweep", "--out", str(tmp_path)]) == 1
    # branches with slopes (2, 2, 2) would overlap, which only surfaces when the map is built
    cfg = {"map": {"kind": "piecewise_linear", "slopes": [2, 2, 2]}, "potential": {"kind": "constant", "value": 0}}
    p.write_text(json.dumps(cfg))
    assert cli.run(["equilibrium", "--config", str(p), "--out", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_exit_code_two_on_nonconvergence(tmp_path, monkeypatch):
    from thermoformalism import thermo
    real = thermo._sweep_point

    def fake(i):
        P, dP, gap, _ = real(i)
        return P, dP, gap, i != 0

    monkeypatch.setattr(thermo, "_sweep_point", fake)
    cfg = {"map": {"kind": "doubling"}, "potential": {"kind": "constant", "value": 0.0}, "N": [16],
           "t": {"min": 0.0, "max": 1.0, "steps": 3}}
    assert cli.run(["pressure-sweep", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path)]) == 2
    rows = read_csv(tmp_path / "pressure_collocation_N16.csv")
    assert [r["converged"] for r in rows] == ["false", "true", "true"]


def test_command_line_overrides(tmp_path):
    path = write_cfg(tmp_path, PL_CFG)
    rc = cli.run(["pressure-sweep", "--config", path, "--out", str(tmp_path), "--n", "16", "--t-min", "0",
                  "--t-max", "1", "--t-steps", "3"])
    assert rc == 0
    rows = read_csv(tmp_path / "pressure_collocation_N16.csv")
    assert [float(r["t"]) for r in rows] == [0.0, 0.5, 1.0]


def test_byte_identical_across_workers(tmp_path):
    cfg = {"map": {"kind": "doubling"}, "potential": {"kind": "trig_poly", "terms": [[1, 1.0, 0.0]]}, "N": [32],
           "t": {"min": -2.0, "max": 2.0, "steps": 9}}
    path = write_cfg(tmp_path, cfg)
    bodies = []
    for w in ("1", "4", "1"):
        out = tmp_path / f"w{w}_{len(bodies)}"
        assert cli.run(["pressure-sweep", "--config", path, "--out", str(out), "--workers", w]) == 0
        bodies.append((out / "pressure_collocation_N32.csv").read_bytes())
    assert bodies[0] == bodies[1] == bodies[2]
    assert b"\r" not in bodies[0]


def test_module_entry_point(tmp_path):
    cfg = {"map": {"kind": "doubling"}, "potential": {"kind": "constant", "value": 0.0}, "N": [16],
           "t": {"min": 0.0, "max": 0.0, "steps": 1}}
    proc = subprocess.run([sys.executable, "-m", "thermoformalism", "pressure-sweep", "--config",
                           write_cfg(tmp_path, cfg), "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "pressure_collocation_N16.csv").exists()


def test_gap_scan_mp_geometric(tmp_path):
    cfg = {"map": {"kind": "manneville_pomeau", "alpha": 0.5}, "potential": {"kind": "geometric"}, "scheme": "ulam",
           "N": [1024, 4096, 16384], "t": {"min": 0.0, "max": 1.5, "steps": 16}}
    assert cli.run(["gap-scan", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path)]) == 0
    cands = json.loads((tmp_path / "gap_scan.json").read_text())["candidates"]
    assert len(cands) == 1
    lo, hi, reasons = cands[0]
    assert lo <= 1.0 <= hi and {"gap_collapse", "freezing"} <= set(reasons)
    assert len(list(tmp_path.glob("gap_ulam_N*.csv"))) == 3

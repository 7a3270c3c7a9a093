"""Command-line driver: JSON config in, CSV and JSON artifacts out.

Usage::

    thermoformalism pressure-sweep --config cfg.json --out results/ --workers 4

Exit status is 0 on success, 2 when some temperature failed to converge (the
artifacts are still written, with flags) and 1 on configuration or build
errors.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import oracle
from . import potentials as pot
from .errors import ConfigError, ThermoError
from .operator import Scheme, build, leading_eigentriple, subleading_modulus
from .thermo import (equilibrium_state, expanding_on_average_certificate, lyapunov_exponents,
                     phase_transition_scan, pressure_sweep, skew_boundary_analysis)

SUBCOMMANDS = ("pressure-sweep", "gap-scan", "equilibrium", "skew-analysis", "oracle-check", "flatten-demo", "report")
MAP_KINDS = ("doubling", "piecewise_linear", "manneville_pomeau", "analytic_perturbed_doubling",
             "smooth_intermittent", "torus_linear", "skew_product")
CONFIG_POTENTIAL_KINDS = ("constant", "trig_poly", "geometric", "fiber_geometric", "custom_grid", "flattened")


# ---------------------------------------------------------------------------
# config

def _require(d, key, path, kind=None):
    if not isinstance(d, dict) or key not in d:
        raise ConfigError(f"{path}: missing field '{key}'")
    v = d[key]
    if kind is not None and not isinstance(v, kind):
        raise ConfigError(f"{path}.{key}: expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}")
    return v


def _number(v, path):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {v!r}")
    return float(v)


@dataclass
class ExperimentConfig:
    """Parsed experiment description; ``to_dict`` re-serialises it."""

    map: dict
    potential: dict
    scheme: str = "collocation"
    N: list = field(default_factory=lambda: [64])
    t_min: float = -1.0
    t_max: float = 1.0
    t_steps: int = 21
    t_values: list = None
    oracle: dict = field(default_factory=dict)
    equilibrium: dict = field(default_factory=dict)
    flatten: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    workers: int = 1

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be an object")
        known = {"map", "potential", "scheme", "N", "t", "oracle", "equilibrium", "flatten", "tolerances",
                 "outputs", "workers"}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"config: unknown field(s) {extra}")
        m = _require(d, "map", "config", dict)
        _check_map_spec(m, "config.map")
        p = _require(d, "potential", "config", dict)
        _check_potential_spec(p, "config.potential")
        scheme = d.get("scheme", "collocation")
        if scheme not in ("ulam", "collocation"):
            raise ConfigError(f"config.scheme: must be 'ulam' or 'collocation', got {scheme!r}")
        N = d.get("N", [64])
        N = [N] if isinstance(N, int) and not isinstance(N, bool) else N
        if not isinstance(N, list) or not N or not all(isinstance(n, int) and not isinstance(n, bool) for n in N):
            raise ConfigError("config.N: expected an integer or a nonempty list of integers")
        if any(n < 8 for n in N):
            raise ConfigError("config.N: every N must be >= 8")
        if any(b <= a for a, b in zip(N[:-1], N[1:])):
            raise ConfigError("config.N: ladder must be strictly increasing")
        t = d.get("t", {})
        if not isinstance(t, dict):
            raise ConfigError("config.t: expected an object")
        t_values = t.get("values")
        if t_values is not None:
            if not isinstance(t_values, list) or not t_values:
                raise ConfigError("config.t.values: expected a nonempty list")
            t_values = [_number(v, f"config.t.values[{i}]") for i, v in enumerate(t_values)]
            if any(b <= a for a, b in zip(t_values[:-1], t_values[1:])):
                raise ConfigError("config.t.values: must be strictly increasing")
        t_min = _number(t.get("min", -1.0), "config.t.min")
        t_max = _number(t.get("max", 1.0), "config.t.max")
        steps = t.get("steps", 21)
        if not isinstance(steps, int) or isinstance(steps, bool) or steps < 1:
            raise ConfigError("config.t.steps: expected a positive integer")
        if t_max < t_min or (steps > 1 and t_max == t_min):
            raise ConfigError("config.t: empty range")
        workers = d.get("workers", 1)
        if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
            raise ConfigError("config.workers: expected a positive integer")
        sections = {}
        for key in ("oracle", "equilibrium", "flatten", "tolerances", "outputs"):
            v = d.get(key, {})
            if not isinstance(v, dict):
                raise ConfigError(f"config.{key}: expected an object")
            sections[key] = copy.deepcopy(v)
        return cls(map=copy.deepcopy(m), potential=copy.deepcopy(p), scheme=scheme, N=list(N), t_min=t_min,
                   t_max=t_max, t_steps=steps, t_values=t_values, workers=workers, **sections)

    def to_dict(self):
        t = {"min": self.t_min, "max": self.t_max, "steps": self.t_steps}
        if self.t_values is not None:
            t["values"] = list(self.t_values)
        return {"map": self.map, "potential": self.potential, "scheme": self.scheme, "N": list(self.N), "t": t,
                "oracle": self.oracle, "equilibrium": self.equilibrium, "flatten": self.flatten,
                "tolerances": self.tolerances, "outputs": self.outputs, "workers": self.workers}

    def t_grid(self):
        if self.t_values is not None:
            return np.array(self.t_values)
        return np.linspace(self.t_min, self.t_max, self.t_steps)


def parse_config(text):
    """Parse JSON text; syntax errors report line and column."""
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return ExperimentConfig.from_dict(d)


def _check_map_spec(m, path):
    kind = _require(m, "kind", path, str)
    if kind not in MAP_KINDS:
        raise ConfigError(f"{path}.kind: unknown map kind {kind!r}")
    if kind == "piecewise_linear":
        s = _require(m, "slopes", path, list)
        for i, v in enumerate(s):
            if _number(v, f"{path}.slopes[{i}]") <= 1:
                raise ConfigError(f"{path}.slopes[{i}]: slopes must exceed 1")
    elif kind == "manneville_pomeau":
        if _number(_require(m, "alpha", path), f"{path}.alpha") <= 0:
            raise ConfigError(f"{path}.alpha: must be positive")
    elif kind == "analytic_perturbed_doubling":
        _number(m.get("eps", 0.0), f"{path}.eps")
    elif kind == "torus_linear":
        A = _require(m, "matrix", path, list)
        if not A or not all(isinstance(r, list) and len(r) == len(A) for r in A):
            raise ConfigError(f"{path}.matrix: expected a square list of lists")
        for i, r in enumerate(A):
            for j, v in enumerate(r):
                if not isinstance(v, int) or isinstance(v, bool):
                    raise ConfigError(f"{path}.matrix[{i}][{j}]: expected an integer")
    elif kind == "skew_product":
        _check_map_spec(_require(m, "base", path, dict), f"{path}.base")
        fib = _require(m, "fiber", path, dict)
        _check_map_spec(_require(fib, "profile", f"{path}.fiber", dict), f"{path}.fiber.profile")
        _number(fib.get("rotation", 0.0), f"{path}.fiber.rotation")
        _number(fib.get("perturbation", 0.0), f"{path}.fiber.perturbation")


def _check_potential_spec(p, path):
    kind = _require(p, "kind", path, str)
    if kind not in CONFIG_POTENTIAL_KINDS:
        raise ConfigError(f"{path}.kind: unknown potential kind {kind!r}")
    if kind == "constant":
        _number(_require(p, "value", path), f"{path}.value")
    elif kind == "trig_poly":
        terms = _require(p, "terms", path, list)
        for i, term in enumerate(terms):
            if not isinstance(term, list) or len(term) != 3:
                raise ConfigError(f"{path}.terms[{i}]: expected [k, a, b]")
            _number(term[1], f"{path}.terms[{i}][1]")
            _number(term[2], f"{path}.terms[{i}][2]")
        _number(p.get("const", 0.0), f"{path}.const")
    elif kind == "custom_grid":
        _require(p, "values", path, list)
    elif kind == "flattened":
        _number(_require(p, "eps", path), f"{path}.eps")
        _check_potential_spec(_require(p, "inner", path, dict), f"{path}.inner")


def make_map(spec):
    kind = spec["kind"]
    if kind == "doubling":
        return dyn.doubling()
    if kind == "piecewise_linear":
        return dyn.piecewise_linear(spec["slopes"])
    if kind == "manneville_pomeau":
        return dyn.manneville_pomeau(spec["alpha"])
    if kind == "analytic_perturbed_doubling":
        return dyn.perturbed_doubling(spec.get("eps", 0.0))
    if kind == "smooth_intermittent":
        return dyn.smooth_intermittent(spec.get("a", 1.0))
    if kind == "torus_linear":
        T = dyn.TorusEndomorphism(spec["matrix"])
        return T.as_circle_map() if T.dim == 1 else T
    if kind == "skew_product":
        fib = spec["fiber"]
        fam = dyn.FiberFamily(make_map(fib["profile"]), rotation=fib.get("rotation", 0.0),
                              perturbation=fib.get("perturbation", 0.0))
        return dyn.SkewProduct(make_map(spec["base"]), fam)
    raise ConfigError(f"unknown map kind {kind!r}")


def make_potential(spec, fmap):
    kind = spec["kind"]
    dim = fmap.dim
    if kind == "constant":
        return pot.constant(spec["value"], dim=dim)
    if kind == "trig_poly":
        return pot.trig_poly([tuple(t) for t in spec["terms"]], const=spec.get("const", 0.0), dim=dim)
    if kind == "geometric":
        return pot.geometric_potential(fmap, "full")
    if kind == "fiber_geometric":
        return pot.geometric_potential(fmap, "fiber")
    if kind == "custom_grid":
        return pot.custom_grid(spec["values"], dim=dim)
    if kind == "flattened":
        return pot.flatten(make_potential(spec["inner"], fmap), spec["eps"], fmap)
    raise ConfigError(f"unknown potential kind {kind!r}")


# ---------------------------------------------------------------------------
# output

def fmt(v):
    """17 significant digits, lowercase exponent; booleans as true/false."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.16e}"


def csv_text(columns, rows):
    lines = [",".join(columns)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def atomic_write(path, text):
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return [_jsonable(v) for v in o.tolist()]
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (float, np.floating)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    return o


def write_json(path, obj):
    atomic_write(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def gnuplot_script(csv_name, ycol="P"):
    cols = ["t", "P", "P_fd", "P_mu", "P2_fd", "gap_ratio"]
    idx = cols.index(ycol) + 1
    return (
        "set datafile separator ','\n"
        "set key autotitle columnhead\n"
        "set xlabel 't'\n"
        f"plot '{csv_name}' using 1:{idx} with linespoints\n"
    )


def curve_csv(curve):
    return csv_text(curve.columns(), curve.rows())


# ---------------------------------------------------------------------------
# subcommands

def _sweeps(cfg, fmap, phi):
    curves = []
    for N in cfg.N:
        curves.append(pressure_sweep(fmap, phi, cfg.t_grid(), Scheme(cfg.scheme, N), workers=cfg.workers))
    return curves


def _curve_summary(c):
    return {"scheme": c.scheme.kind, "N": c.N, "tol": c.tol, "checks": c.checks(),
            "all_converged": bool(c.converged.all()), "candidates": c.transition_candidates}


def cmd_pressure_sweep(cfg, out, args):
    fmap = make_map(cfg.map)
    phi = make_potential(cfg.potential, fmap)
    curves = _sweeps(cfg, fmap, phi)
    files = []
    for c in curves:
        name = f"pressure_{c.scheme.kind}_N{c.N}.csv"
        atomic_write(out / name, curve_csv(c))
        files.append(name)
        if cfg.outputs.get("gnuplot"):
            atomic_write(out / f"pressure_{c.scheme.kind}_N{c.N}.gp", gnuplot_script(name))
    write_json(out / "pressure_summary.json", {"config": cfg.to_dict(), "files": files,
                                               "curves": [_curve_summary(c) for c in curves]})
    return 0 if all(c.converged.all() for c in curves) else 2


def cmd_gap_scan(cfg, out, args):
    if len(cfg.N) < 2:
        raise ConfigError("config.N: gap-scan needs a ladder of at least two values")
    fmap = make_map(cfg.map)
    phi = make_potential(cfg.potential, fmap)
    curves = _sweeps(cfg, fmap, phi)
    scan = phase_transition_scan(curves[-1], curves)
    for c in curves:
        atomic_write(out / f"gap_{c.scheme.kind}_N{c.N}.csv", curve_csv(c))
    write_json(out / "gap_scan.json", {
        "config": cfg.to_dict(), "candidates": scan.candidates, "analytic_set": scan.analytic_set,
        "levels": [_curve_summary(c) for c in curves],
    })
    return 0 if all(c.converged.all() for c in curves) else 2


def cmd_equilibrium(cfg, out, args):
    fmap = make_map(cfg.map)
    phi = make_potential(cfg.potential, fmap)
    t = float(cfg.equilibrium.get("t", 1.0))
    l_max = int(cfg.equilibrium.get("l_max", 4))
    N = cfg.N[-1]
    mu = equilibrium_state(fmap, phi, Scheme(cfg.scheme, N), t=t)
    rep = mu.report
    coords = np.asarray(mu.points).reshape(len(rep.h), -1)
    names = ["x"] if coords.shape[1] == 1 else [f"x{i}" for i in range(coords.shape[1])]
    rows = [(*c, hv, nv, m) for c, hv, nv, m in zip(coords, rep.h, rep.nu, mu.weights)]
    atomic_write(out / "equilibrium.csv", csv_text(names + ["h", "nu", "mu"], rows))
    lyap = lyapunov_exponents(mu, fmap)
    cert = expanding_on_average_certificate(mu, fmap, l_max)
    write_json(out / "equilibrium.json", {
        "config": cfg.to_dict(), "t": t, "lambda1": rep.lambda1, "pressure": rep.pressure,
        "gap_ratio": rep.gap_ratio, "converged": rep.converged,
        "residuals": {"right": rep.residual_right, "left": rep.residual_left},
        "lyapunov": {"exponents": list(lyap.exponents), "lambda_min": lyap.lambda_min},
        "certificate": {"certified": cert.certified, "l": cert.l, "value": cert.value, "values": cert.values},
    })
    return 0 if rep.converged else 2


def cmd_skew_analysis(cfg, out, args):
    fmap = make_map(cfg.map)
    if not isinstance(fmap, dyn.SkewProduct):
        raise ConfigError("config.map: skew-analysis needs a skew_product map")
    phi = make_potential(cfg.potential, fmap)
    rep = skew_boundary_analysis(fmap, phi, cfg.t_grid(), Scheme(cfg.scheme, cfg.N[-1]), workers=cfg.workers)
    atomic_write(out / "skew.csv", curve_csv(rep.full_curve))
    write_json(out / "skew.json", {
        "config": cfg.to_dict(), "class_tag": fmap.class_tag, "tol": rep.tol,
        "subsystem_ok": rep.subsystem_ok(), "labels": rep.labels, "margin": rep.margin,
        "fiber_boundary": rep.fiber_boundary, "base_boundary": rep.base_boundary,
    })
    return 0 if rep.full_curve.converged.all() else 2


def cmd_oracle_check(cfg, out, args):
    fmap = make_map(cfg.map)
    phi = make_potential(cfg.potential, fmap)
    o = cfg.oracle
    result = {"config": cfg.to_dict(), "oracle": {}}
    curves = _sweeps(cfg, fmap, phi)
    status = 0 if all(c.converged.all() for c in curves) else 2
    t = cfg.t_grid()
    exact = None
    if cfg.map["kind"] == "piecewise_linear" and cfg.potential["kind"] == "geometric":
        exact = oracle.closed_form_pressure_pl(cfg.map["slopes"], t)
        result["oracle"]["closed_form"] = {
            f"{c.scheme.kind}_N{c.N}": float(np.max(np.abs(c.P - exact))) for c in curves}
    t_ref = float(o.get("t", 1.0))
    scaled = phi * t_ref
    x0s = [float(x) for x in o.get("x0", [0.0])]
    if "x0_random" in o:
        rng = np.random.default_rng(args.seed)
        x0s += rng.random(int(o["x0_random"])).tolist()
    estimator = o.get("estimator", "mean")
    pre = {}
    for n in o.get("preimage_n", []):
        pre[str(n)] = [oracle.pressure_preimage_sum(fmap, scaled, x0, int(n), estimator=estimator)
                       for x0 in x0s]
    per = {}
    for n in o.get("periodic_n", []):
        per[str(n)] = oracle.pressure_periodic_sum(fmap, scaled, int(n))
    op = build(fmap, phi, Scheme(cfg.scheme, cfg.N[-1]), t=t_ref)
    rep = leading_eigentriple(op)
    subleading_modulus(op, rep)
    result["oracle"].update({"t": t_ref, "x0": x0s, "operator_pressure": rep.pressure,
                             "preimage_sum": pre, "estimator": estimator, "periodic_sum": per, "gap_ratio": rep.gap_ratio})
    if op.N <= 64:
        ev = oracle.dense_spectrum_oracle(op)
        result["oracle"]["dense_top_moduli"] = np.abs(ev[:4]).tolist()
    exact = exact if "closed_form" in result["oracle"] else np.full(len(t), np.nan)
    rows = [(c.N, t[i], c.P[i], exact[i]) for c in curves for i in range(len(t))]
    atomic_write(out / "oracle.csv", csv_text(["N", "t", "P", "P_exact"], rows))
    write_json(out / "oracle.json", result)
    return status


def cmd_flatten_demo(cfg, out, args):
    fmap = make_map(cfg.map)
    phi = make_potential(cfg.potential, fmap)
    f = cfg.flatten
    ks = list(range(int(f.get("k_min", 2)), int(f.get("k_max", 8)) + 1))
    devs = [pot.flatten_deviation(phi, 2.0 ** -k, fmap) for k in ks]
    eps = float(f.get("eps", 1.0 / 16))
    flat = pot.flatten(phi, eps, fmap)
    t_vals = [float(v) for v in f.get("t", [-4, -2, -1, 0, 1, 2, 4])]
    gaps = {}
    status = 0
    for N in cfg.N:
        c = pressure_sweep(fmap, flat, np.array(t_vals), Scheme(cfg.scheme, N), workers=cfg.workers)
        gaps[str(N)] = c.gap_ratio.tolist()
        status = status or (0 if c.converged.all() else 2)
    atomic_write(out / "flatten.csv", csv_text(["k", "eps", "sup_deviation"], [(k, 2.0 ** -k, d) for k, d in zip(ks, devs)]))
    write_json(out / "flatten.json", {
        "config": cfg.to_dict(), "deviations": dict(zip(map(str, ks), devs)),
        "monotone": bool(all(b < a for a, b in zip(devs[:-1], devs[1:]))),
        "eps": eps, "t": t_vals, "gap_ratio": gaps,
        "gap_ok": bool(all(g < 0.99 for v in gaps.values() for g in v)),
    })
    return status


def cmd_report(cfg, out, args):
    summary = {}
    for p in sorted(out.glob("*.json")):
        if p.name == "report.json":
            continue
        with open(p) as fh:
            data = json.load(fh)
        data.pop("config", None)
        summary[p.stem] = data
    csvs = sorted(p.name for p in out.glob("*.csv"))
    write_json(out / "report.json", {"artifacts": csvs, "summaries": summary})
    if cfg is None or cfg.outputs.get("gnuplot", True):
        script = "".join(gnuplot_script(name) for name in csvs if name.startswith(("pressure_", "gap_")))
        atomic_write(out / "report.gp", script)
    return 0


COMMANDS = {
    "pressure-sweep": cmd_pressure_sweep,
    "gap-scan": cmd_gap_scan,
    "equilibrium": cmd_equilibrium,
    "skew-analysis": cmd_skew_analysis,
    "oracle-check": cmd_oracle_check,
    "flatten-demo": cmd_flatten_demo,
    "report": cmd_report,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="thermoformalism", description="Transfer-operator thermodynamic formalism experiments.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="JSON experiment config")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--workers", type=int, help="worker processes for temperature sweeps")
    ap.add_argument("--seed", type=int, default=0, help="seed for random base points in oracle checks")
    ap.add_argument("--scheme", choices=("ulam", "collocation"))
    ap.add_argument("--n", type=int, action="append", help="discretisation size (repeat for a ladder)")
    ap.add_argument("--t-min", type=float)
    ap.add_argument("--t-max", type=float)
    ap.add_argument("--t-steps", type=int)
    return ap


def load_config(args):
    if args.config is None:
        raise ConfigError("--config is required")
    cfg = parse_config(Path(args.config).read_text())
    d = cfg.to_dict()
    if args.scheme:
        d["scheme"] = args.scheme
    if args.n:
        d["N"] = args.n
    for key, val in (("min", args.t_min), ("max", args.t_max), ("steps", args.t_steps)):
        if val is not None:
            d["t"][key] = val
            d["t"].pop("values", None)
    if args.workers is not None:
        d["workers"] = args.workers
    return ExperimentConfig.from_dict(d)


def run(argv=None):
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = load_config(args) if (args.subcommand != "report" or args.config) else None
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.subcommand](cfg, out, args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ThermoError, ValueError, NotImplementedError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

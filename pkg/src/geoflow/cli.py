"""Command-line front end: ``geoflow {entropy,count,tube,validate}``.

Configuration precedence is flags > ``--config`` JSON file > defaults.  Every
report is a JSON document with ``"schema": 1``, the fully resolved config, the
seed and a timestamp (the only field that changes between identical runs).

Exit codes: 0 success, 1 configuration error, 2 degenerate data or a failed
validation check.
"""

from __future__ import annotations

import argparse
import csv
import importlib
import io
import json
import math
import os
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import adapted, counting, entropy, flow, integrate
from .errors import ConfigError, GeoflowError, InvalidMetricError, error_code
from .metrics import SurfaceMetric, SurfacePoint, metric_from_dict

SCHEMA = 1
EXIT_OK, EXIT_CONFIG, EXIT_DEGENERATE = 0, 1, 2

DEFAULTS = {
    "common": {"metric": "sphere", "seed": 0, "threads": None, "out": None, "format": "json", "plugin": []},
    "entropy": {"method": "mane", "Tmax": 30.0, "Tsteps": 10, "samples": None, "eps": None, "radius": None,
                "mesh": None, "directions": counting.DEFAULT_DIRECTIONS},
    "count": {"x": None, "y": None, "T": None, "resolution": 2 * math.pi / counting.DEFAULT_DIRECTIONS,
              "hit_tol": None, "eps": None},
    "tube": {"K": None, "profile": None, "tau_max": 5.0, "tau_steps": 100, "sigma_samples": 41,
             "point": None, "direction": 0.3, "length": None, "degree": 32, "verify": False, "eps": None},
    "validate": {"T": 5.0, "samples": 2000, "states": 100, "eps": None},
}
METRIC_ALIASES = {"sphere": "round-sphere", "torus": "flat-torus"}
DEFAULT_PATERNAIN_EPS = 0.05


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def metric_doc(source, eps=None) -> dict:
    """Geometry document from a name, ``custom:NAME``, a JSON string or a dict."""
    if isinstance(source, dict):
        doc = json.loads(json.dumps(source))
    elif isinstance(source, str) and source.lstrip().startswith("{"):
        try:
            doc = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--metric is not valid JSON: {exc}") from None
    elif isinstance(source, str) and source.startswith("custom:"):
        doc = {"kind": "custom", "params": {"name": source.split(":", 1)[1]}}
    elif isinstance(source, str):
        doc = {"kind": METRIC_ALIASES.get(source, source), "params": {}}
    else:
        raise ConfigError(f"cannot interpret metric {source!r}")
    doc.setdefault("params", {})
    if doc.get("kind") == "paternain":
        if eps is not None:
            doc["params"]["eps"] = float(eps)
        doc["params"].setdefault("eps", DEFAULT_PATERNAIN_EPS)
    elif eps is not None:
        raise ConfigError("--eps is the Paternain deformation parameter; the spanning radius is --radius")
    return doc


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                from_file = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        if not isinstance(from_file, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(from_file) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(from_file)
    for k in cfg:
        val = getattr(args, k, None)
        if val is not None and val != []:
            cfg[k] = val
    if cfg["threads"] is None:
        env = os.environ.get("GEOFLOW_THREADS")
        try:
            cfg["threads"] = int(env) if env else (os.cpu_count() or 1)
        except ValueError:
            raise ConfigError(f"GEOFLOW_THREADS={env!r} is not an integer") from None
    if cfg["format"] not in ("json", "csv"):
        raise ConfigError("format must be json or csv")
    return cfg


def parse_point(metric: SurfaceMetric, text) -> SurfacePoint:
    """``u1,u2`` (chart 0), ``C:u1,u2`` (chart C) or ``ambient:x,y,z`` (quadrics)."""
    if isinstance(text, dict):
        return metric.point(text["coords"], text.get("chart", 0))
    try:
        if text.startswith("ambient:"):
            X = np.array([float(a) for a in text.split(":", 1)[1].split(",")])
            if not hasattr(metric, "point_from_ambient") or len(X) != 3:
                raise ConfigError("ambient points need three coordinates and an embedded metric")
            return metric.point_from_ambient(X)
        chart = 0
        if ":" in text:
            head, text = text.split(":", 1)
            chart = int(head)
        coords = [float(a) for a in text.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse point {text!r}") from None
    if len(coords) != 2:
        raise ConfigError(f"point {text!r} needs two coordinates")
    return metric.point(coords, chart)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(a)) if isinstance(a, (float, np.floating)) else a for a in r])
    return buf.getvalue()


def make_report(command, cfg, result) -> dict:
    return {
        "schema": SCHEMA,
        "command": command,
        "config": entropy._plain(cfg),
        "seed": cfg["seed"],
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "result": entropy._plain(result),
    }


def dump_json(report) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False, ensure_ascii=False) + "\n"


def emit(cfg, stem, report, csv_text, stdout):
    text = dump_json(report)
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(text, encoding="utf-8")
        if csv_text is not None:
            with open(out / f"{stem}.csv", "w", newline="") as fh:
                fh.write(csv_text)
    if cfg["format"] == "csv" and csv_text is not None:
        stdout.write(csv_text)
    else:
        stdout.write(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _curvature_check(metric, n=10_000, seed=0):
    c, u = metric.sample_points(n, np.random.default_rng(seed), qmc_seed=seed)
    K = metric.curvature(c, u)
    return {"samples": n, "min_K": float(K.min()), "max_K": float(K.max()), "positive": bool(np.all(K > 0))}


def _horizons(cfg):
    n, Tmax = int(cfg["Tsteps"]), float(cfg["Tmax"])
    if n < 5 or Tmax <= 0:
        raise ConfigError("need Tsteps >= 5 and Tmax > 0")
    return Tmax * np.arange(1, n + 1) / n


def cmd_entropy(cfg, metric, stdout) -> int:
    methods = ["mane", "jacobi-det", "spanning"] if cfg["method"] == "all" else cfg["method"].split(",")
    bad = set(methods) - set(entropy.METHODS)
    if bad:
        raise ConfigError(f"unknown method(s) {sorted(bad)}; choose from {entropy.METHODS} or 'all'")
    T = _horizons(cfg)
    exploratory = metric.kind == "paternain"
    result = {"metric": metric.describe(), "exploratory": exploratory, "estimates": {}}
    if exploratory:
        result["curvature_check"] = _curvature_check(metric, seed=cfg["seed"])
    csv_parts = []
    code = EXIT_OK
    for m in methods:
        if m == "mane":
            series = entropy.mane_series(metric, T, pair_samples=cfg["samples"] or 64, seed=cfg["seed"],
                                         n_dirs=cfg["directions"])
        elif m == "jacobi-det":
            series = entropy.jacobi_det_series(metric, T, theta_samples=cfg["samples"] or 1000, seed=cfg["seed"])
        else:
            series = entropy.spanning_series(metric, cfg["radius"], T, cfg["mesh"], method=m)
        entry = {"series": series.to_dict()}
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                est = entropy.fit_entropy(series)
            est.exploratory = exploratory
            entry["estimate"] = est.to_dict()
        except ValueError as exc:
            entry["estimate"] = None
            entry["error"] = {"code": "degenerate-data", "message": str(exc)}
            code = EXIT_DEGENERATE
        result["estimates"][m] = entry
        csv_parts.append((m, series))
    rows = [(m, float(t), float(v)) for m, s in csv_parts for t, v in zip(s.horizons, s.values)]
    emit(cfg, "entropy", make_report("entropy", cfg, result), _rows_csv(["method", "T", "value"], rows), stdout)
    return code


def cmd_count(cfg, metric, stdout) -> int:
    if cfg["x"] is None or cfg["y"] is None or cfg["T"] is None:
        raise ConfigError("count needs --x, --y and --T")
    x, y = parse_point(metric, cfg["x"]), parse_point(metric, cfg["y"])
    res = counting.count_geodesics(metric, x, y, float(cfg["T"]), resolution=cfg["resolution"],
                                   hit_tol=cfg["hit_tol"])
    out = res.to_dict()
    out["metric"] = metric.describe()
    rows = [(i, t) for i, t in enumerate(out["lengths"])]
    emit(cfg, "count", make_report("count", cfg, out), _rows_csv(["index", "length"], rows), stdout)
    return EXIT_DEGENERATE if res.degenerate else EXIT_OK


def _tube_profile(cfg, metric):
    if cfg["K"] is not None:
        return adapted.constant_profile(cfg["K"])
    if cfg["profile"] is not None:
        try:
            return adapted.closed_form_profile(cfg["profile"])
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
    p = parse_point(metric, cfg["point"] or ("0.1,0.2"))
    theta = flow.phase_point(metric, p.coords, float(cfg["direction"]), p.chart)
    length = cfg["length"] or 4.0 * metric.length_scale
    return adapted.chebyshev_profile(metric, p.chart, p.coords, theta.velocity, length, int(cfg["degree"]))


def cmd_tube(cfg, metric, stdout) -> int:
    prof = _tube_profile(cfg, metric)
    tau_max = float(cfg["tau_max"])
    if tau_max > prof.strip:
        raise ConfigError(f"--tau-max {tau_max:g} exceeds the validity strip half-width {prof.strip:g}")
    a, b = prof.real_range
    sigma = np.linspace(max(a, -np.pi / 2), min(b, np.pi / 2), int(cfg["sigma_samples"]))
    probe = adapted.tube_radius_probe(prof, tau_max, int(cfg["tau_steps"]), sigma)
    out = probe.to_dict()
    if cfg["verify"]:
        out["verification"] = adapted.verify_theorem_mero(
            prof, sigma, np.linspace(0.0, min(3.0, tau_max), 51)[1:])
    Z, fn = adapted.f_grid(prof, sigma, np.linspace(0.0, tau_max, 51)[1:])
    mins = np.minimum(fn.imag, Z.imag)
    rows = [(z.real, z.imag, f.real, f.imag, m) for z, f, m in zip(Z.ravel(), fn.ravel(), mins.ravel())]
    emit(cfg, "tube", make_report("tube", cfg, out), _rows_csv(adapted.FGRID_CSV_HEADER, rows), stdout)
    return EXIT_OK


def _check(name, fn):
    try:
        res = fn()
    except GeoflowError as exc:
        return {"name": name, "pass": False, "error": error_code(exc), "message": str(exc)}
    res["name"] = name
    return res


def run_validation(metric: SurfaceMetric, T=5.0, samples=2000, states=100, seed=0) -> list[dict]:
    """Cross-module invariant checks for one metric."""
    rng = np.random.default_rng(seed)
    c, u = metric.sample_points(min(1000, samples), rng, qmc_seed=seed)
    checks = []

    def spd():
        g = metric.check_positive_definite(c, u)
        G = metric.christoffel(c, u)
        sym = float(np.max(np.abs(G - np.swapaxes(G, -1, -2))))
        asym = float(np.max(np.abs(g - np.swapaxes(g, -1, -2))))
        return {"pass": sym == 0.0 and asym == 0.0, "points": len(u), "christoffel_asymmetry": sym}

    checks.append(_check("metric-positive-definite", spd))

    periodic_or_closed = metric.compiled_params() is not None
    T_long = 100.0 if periodic_or_closed else min(100.0, 0.5 * metric.length_scale)

    def drift():
        e1, _ = metric.frame(c[:8], u[:8])
        y0 = np.concatenate([u[:8], e1], axis=1)
        res = integrate.propagate(metric, c[:8], y0, T_long)
        d = float(res.energy_drift.max())
        return {"pass": d < 1e-6, "T": T_long, "max_energy_drift": d}

    checks.append(_check("energy-conservation", drift))

    def wronskian():
        th = flow.phase_point(metric, u[0], 0.4, int(c[0]))
        arc = flow.integrate_geodesic(metric, th, min(20.0, T_long))
        w = float(np.max(np.abs(arc.wronskian() - 1.0)))
        return {"pass": w < 1e-7, "max_relative_drift": w}

    checks.append(_check("wronskian", wronskian))

    def lemma():
        n = states
        cc, uu = metric.sample_points(n, rng)
        ang = rng.uniform(0, 2 * np.pi, n)
        e1, e2 = metric.frame(cc, uu)
        v = np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2
        xi = rng.normal(size=(n, 4))
        Tl = T if periodic_or_closed else min(T, 0.2 * metric.length_scale)
        err = flow.flow_differential_check(metric, cc, uu, v, xi, Tl)
        return {"pass": bool(np.max(err) < 1e-3), "states": n, "T": Tl, "max_relative_error": float(np.max(err))}

    checks.append(_check("flow-differential", lemma))

    if periodic_or_closed:
        def identity():
            x = (c[:1], u[:1])
            direct, se = counting.counting_integral_direct(metric, x, T, samples, seed)
            bb = counting.berger_bott_integral(metric, x, T)
            gap = abs(direct - bb) / bb
            return {"pass": gap < 0.02, "T": T, "samples": samples, "direct": direct, "direct_stderr": se,
                    "berger_bott": bb, "relative_gap": gap}

        checks.append(_check("counting-identity", identity))

    if metric.kind == "paternain":
        def positivity():
            r = _curvature_check(metric, seed=seed)
            r["pass"] = r["positive"]
            return r

        checks.append(_check("curvature-positive", positivity))
    return checks


def cmd_validate(cfg, metric, stdout) -> int:
    checks = run_validation(metric, float(cfg["T"]), int(cfg["samples"]), int(cfg["states"]), cfg["seed"])
    ok = all(c["pass"] for c in checks)
    out = {"metric": metric.describe(), "pass": ok, "checks": checks}
    rows = [(c["name"], "pass" if c["pass"] else "fail") for c in checks]
    emit(cfg, "validate", make_report("validate", cfg, out), _rows_csv(["check", "status"], rows), stdout)
    return EXIT_OK if ok else EXIT_DEGENERATE


COMMANDS = {"entropy": cmd_entropy, "count": cmd_count, "tube": cmd_tube, "validate": cmd_validate}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--metric", help="sphere, torus, ellipsoid, paternain, custom:NAME or a JSON document")
    common.add_argument("--config", help="JSON file of option values (flags take precedence)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads (default: $GEOFLOW_THREADS or all cores)")
    common.add_argument("--out", help="directory for report files")
    common.add_argument("--format", choices=["json", "csv"], help="what to print on stdout")
    common.add_argument("--plugin", action="append", default=[],
                        help="module to import first (e.g. one that registers custom metrics)")

    p = argparse.ArgumentParser(prog="geoflow", description="Geodesic flows on surfaces: counting, entropy, tubes.")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("entropy", parents=[common], help="estimate topological entropy")
    e.add_argument("--method", help=f"one of {', '.join(entropy.METHODS)}, a comma list, or all")
    e.add_argument("--Tmax", type=float)
    e.add_argument("--Tsteps", type=int)
    e.add_argument("--samples", type=int, help="pairs (mane) or phase points (jacobi-det)")
    e.add_argument("--eps", type=float, help="Paternain deformation parameter")
    e.add_argument("--radius", type=float, help="ε of the spanning/separated/covering counts")
    e.add_argument("--mesh", type=int, nargs=2, metavar=("BASE", "ANGLES"))
    e.add_argument("--directions", type=int, help="shooting directions for counting")

    c = sub.add_parser("count", parents=[common], help="count geodesic arcs between two points")
    c.add_argument("--x", help="u1,u2 | C:u1,u2 | ambient:x,y,z")
    c.add_argument("--y")
    c.add_argument("--T", type=float)
    c.add_argument("--resolution", type=float, help="angular resolution of the shooting fan")
    c.add_argument("--hit-tol", dest="hit_tol", type=float)
    c.add_argument("--eps", type=float, help="Paternain deformation parameter")

    t = sub.add_parser("tube", parents=[common], help="probe the Grauert tube radius along a leaf")
    t.add_argument("--K", type=float, help="constant curvature profile")
    t.add_argument("--profile", help=f"closed-form profile: {', '.join(sorted(adapted.CLOSED_FORMS))}")
    t.add_argument("--tau-max", dest="tau_max", type=float)
    t.add_argument("--tau-steps", dest="tau_steps", type=int)
    t.add_argument("--sigma-samples", dest="sigma_samples", type=int)
    t.add_argument("--point", help="start of the geodesic for a fitted profile")
    t.add_argument("--direction", type=float, help="angle of the geodesic for a fitted profile")
    t.add_argument("--length", type=float, help="fitted arc length")
    t.add_argument("--degree", type=int, help="Chebyshev degree")
    t.add_argument("--verify", action="store_true", default=None, help="also check f(0), f'(0), symmetry, Im f > 0")
    t.add_argument("--eps", type=float, help="Paternain deformation parameter")

    v = sub.add_parser("validate", parents=[common], help="run the invariant suite for one metric")
    v.add_argument("--T", type=float, help="horizon of the counting-identity and flow-differential checks")
    v.add_argument("--samples", type=int, help="Monte Carlo targets for the counting identity")
    v.add_argument("--states", type=int, help="random states for the flow-differential check")
    v.add_argument("--eps", type=float, help="Paternain deformation parameter")
    return p


def main(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        for mod in cfg["plugin"]:
            importlib.import_module(mod)
        cfg["metric"] = metric_doc(cfg["metric"], cfg.pop("eps", None))
        integrate.set_threads(int(cfg["threads"]))
        try:
            metric = metric_from_dict(cfg["metric"])
            cfg["metric"] = metric.describe()
        except InvalidMetricError as exc:
            raise ConfigError(str(exc)) from None
        except GeoflowError as exc:
            if args.command != "validate":
                raise
            report = make_report("validate", cfg, {
                "metric": cfg["metric"], "pass": False,
                "checks": [{"name": "construct", "pass": False, "error": error_code(exc), "message": str(exc)}],
            })
            emit(cfg, "validate", report, None, stdout)
            return EXIT_DEGENERATE
        return COMMANDS[args.command](cfg, metric, stdout)
    except (ConfigError, ImportError) as exc:
        print(f"geoflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GeoflowError as exc:
        print(f"geoflow: {error_code(exc)}: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())

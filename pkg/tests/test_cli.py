import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from geoflow import cli
from geoflow import metrics as M
from geoflow.integrate import get_threads


def run(args):
    buf = io.StringIO()
    code = cli.main(args, stdout=buf)
    return code, buf.getvalue()


def run_json(args):
    code, text = run(args)
    return code, json.loads(text)


def strip_time(text):
    d = json.loads(text)
    d.pop("timestamp")
    return json.dumps(d, sort_keys=True)


@pytest.mark.parametrize("K,tau_max,expected", [(-1, 2, None), (0, 10, "≥ 10"), (1, 5, "≥ 5")])
def test_tube_examples(K, tau_max, expected):
    code, d = run_json(["tube", "--K", str(K), "--tau-max", str(tau_max)])
    assert code == 0
    res = d["result"]
    if expected is None:
        assert abs(res["radius"] - math.pi / 2) < 1e-3
        assert res["report"] == f"{res['radius']:.6f}"
    else:
        assert res["report"] == expected and res["radius"] is None


def test_tube_verify_and_strip():
    code, d = run_json(["tube", "--K", "1", "--tau-max", "3", "--verify"])
    assert code == 0 and d["result"]["verification"]["pass"]
    code, _ = run(["tube", "--metric", "ellipsoid", "--length", "2", "--tau-max", "1"])
    assert code == 1  # beyond the quarter-range validity strip
    code, d = run_json(["tube", "--metric", "ellipsoid", "--length", "4", "--tau-max", "0.8", "--tau-steps", "8"])
    assert code == 0 and d["result"]["profile"]["kind"] == "chebyshev-fit"


def test_count_examples():
    code, d = run_json(["count", "--metric", "torus", "--x", "0,0", "--y", "0,0", "--T", "2.5"])
    assert code == 0 and d["result"]["count"] == 21 and d["result"]["includes_trivial"]
    y = f"ambient:{math.cos(1.0)},{math.sin(1.0)},0"
    code, d = run_json(["count", "--metric", "sphere", "--x", "ambient:1,0,0", "--y", y, "--T", "7"])
    assert code == 0 and d["result"]["count"] == 2
    assert d["result"]["lengths"] == pytest.approx([1.0, 2 * math.pi - 1.0], abs=1e-8)
    code, d = run_json(["count", "--metric", "torus", "--x", "0.1,0.1", "--y", "0.6,0.5", "--T", "0.1"])
    assert code == 0 and d["result"]["count"] == 0


def test_count_degenerate_exit_code():
    code, d = run_json(["count", "--metric", "sphere", "--x", "ambient:1,0,0", "--y", "ambient:-1,0,0", "--T", "4"])
    assert code == 2 and d["result"]["degenerate"]


def test_entropy_torus_jacobi_det(tmp_path):
    code, d = run_json(["entropy", "--metric", "torus", "--method", "jacobi-det", "--Tmax", "50",
                        "--out", str(tmp_path)])
    assert code == 0
    est = d["result"]["estimates"]["jacobi-det"]["estimate"]
    assert est["h"] < 0.02 and est["growth_class"]["kind"] == "polynomial"
    assert d["schema"] == 1 and d["seed"] == 0
    assert d["config"]["metric"] == {"kind": "flat-torus", "params": {"basis": [[1.0, 0.0], [0.0, 1.0]]}}
    on_disk = json.loads((tmp_path / "entropy.json").read_text(encoding="utf-8"))
    assert on_disk["result"] == d["result"]
    raw = (tmp_path / "entropy.csv").read_bytes()
    assert raw.startswith(b"method,T,value\r\n")
    rows = list(csv.reader(io.StringIO(raw.decode())))
    assert len(rows) == 11 and float(rows[-1][1]) == 50.0


@pytest.mark.slow
def test_entropy_sphere_mane():
    code, d = run_json(["entropy", "--metric", "sphere", "--method", "mane", "--Tmax", "30", "--samples", "16"])
    assert code == 0
    est = d["result"]["estimates"]["mane"]["estimate"]
    assert est["h"] < 0.05 and est["growth_class"]["kind"] == "polynomial"
    assert d["result"]["exploratory"] is False


def test_entropy_paternain_exploratory():
    code, d = run_json(["entropy", "--metric", "paternain", "--eps", "0.05", "--method", "jacobi-det",
                        "--Tmax", "10", "--samples", "100"])
    assert code == 0
    res = d["result"]
    assert res["exploratory"] is True
    assert res["estimates"]["jacobi-det"]["estimate"]["exploratory"] is True
    assert res["curvature_check"]["positive"] and res["curvature_check"]["samples"] == 10_000
    assert d["config"]["metric"]["params"]["eps"] == 0.05


def test_csv_format_to_stdout():
    code, text = run(["entropy", "--metric", "torus", "--method", "jacobi-det", "--Tmax", "5",
                      "--samples", "10", "--format", "csv"])
    assert code == 0
    assert text.startswith("method,T,value\r\n")
    assert len(text.strip().split("\r\n")) == 11


def test_determinism_modulo_timestamp():
    args = ["entropy", "--metric", "sphere", "--method", "mane", "--Tmax", "6", "--samples", "8", "--seed", "3"]
    _, a = run(args)
    _, b = run(args)
    assert strip_time(a) == strip_time(b)
    assert json.loads(a)["seed"] == 3


def test_config_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"Tmax": 8.0, "Tsteps": 6, "method": "jacobi-det", "metric": "torus", "samples": 5}))
    _, d = run_json(["entropy", "--config", str(cfg)])
    assert d["config"]["Tmax"] == 8.0 and d["config"]["Tsteps"] == 6
    _, d = run_json(["entropy", "--config", str(cfg), "--Tmax", "12"])
    assert d["config"]["Tmax"] == 12.0
    assert d["result"]["estimates"]["jacobi-det"]["series"]["horizons"][-1] == 12.0
    monkeypatch.setenv("GEOFLOW_THREADS", "3")
    _, d = run_json(["entropy", "--config", str(cfg)])
    assert d["config"]["threads"] == 3 and get_threads() == 3
    _, d = run_json(["entropy", "--config", str(cfg), "--threads", "2"])
    assert d["config"]["threads"] == 2


def test_config_errors(tmp_path, capsys):
    assert run(["count", "--metric", "hyperboloid", "--x", "0,0", "--y", "0,0", "--T", "1"])[0] == 1
    assert run(["entropy", "--metric", "sphere", "--eps", "0.1"])[0] == 1
    assert run(["entropy", "--method", "nope"])[0] == 1
    assert run(["count", "--metric", "torus", "--x", "0,0"])[0] == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["entropy", "--config", str(bad)])[0] == 1
    bad.write_text(json.dumps({"colour": "red"}))
    assert run(["entropy", "--config", str(bad)])[0] == 1
    monkeypatch_env = {"GEOFLOW_THREADS": "many"}
    import os
    old = os.environ.get("GEOFLOW_THREADS")
    os.environ.update(monkeypatch_env)
    try:
        assert run(["tube", "--K", "0", "--tau-max", "1"])[0] == 1
    finally:
        if old is None:
            del os.environ["GEOFLOW_THREADS"]
        else:
            os.environ["GEOFLOW_THREADS"] = old
    assert "configuration error" in capsys.readouterr().err


def test_validate_sphere_suite():
    code, d = run_json(["validate", "--metric", "sphere"])
    assert code == 0 and d["result"]["pass"]
    names = {c["name"] for c in d["result"]["checks"]}
    assert {"metric-positive-definite", "energy-conservation", "wronskian", "flow-differential",
            "counting-identity"} <= names


def test_validate_corrupted_custom_metric(tmp_path, monkeypatch):
    (tmp_path / "corrupt_metric_plugin.py").write_text(
        "from geoflow import register_custom_metric\n"
        "register_custom_metric('corrupt', lambda a, b: 1 + 0 * a, lambda a, b: 3 + 0 * a,\n"
        "                       lambda a, b: 1 + 0 * a, ((0, 1), (0, 1)))\n"
    )
    monkeypatch.syspath_prepend(str(tmp_path))
    code, d = run_json(["validate", "--metric", "custom:corrupt", "--plugin", "corrupt_metric_plugin"])
    assert code == 2
    assert not d["result"]["pass"]
    assert d["result"]["checks"][0]["error"] == "non-positive-definite"


@pytest.mark.slow
def test_validate_torus_counting_identity():
    code, d = run_json(["validate", "--metric", "torus", "--T", "5"])
    assert code == 0
    chk = {c["name"]: c for c in d["result"]["checks"]}["counting-identity"]
    assert chk["relative_gap"] < 0.02 and chk["samples"] == 2000


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "geoflow", "tube", "--K", "0", "--tau-max", "2"],
                         capture_output=True, text=True, check=True)
    assert json.loads(out.stdout)["result"]["report"] == "≥ 2"
    assert subprocess.run([sys.executable, "-m", "geoflow", "--help"], capture_output=True).returncode == 0

import csv
import json
import os
import subprocess
import sys

import pytest

from smforge.analysis.records import read_catalog_csv
from smforge.cli import EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_FORMAT, EXIT_OK, main, verify_manifest
from smforge.instrument import read_smfs, read_traces_csv

MINIMAL = {
    "name": "minimal",
    "seed": 3,
    "sample": {"emitters_per_nc": {"fixed": 3}, "nc_radius_nm": 300.0},
    "instrument": {
        "camera": {"width": 24, "height": 24},
        "widefield": {"f_start_thz": 381.8998, "f_stop_thz": 381.9002, "repetitions": 2, "power_nw": 1.0},
    },
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _digests(out):
    m = json.loads((out / "manifest.json").read_text())
    return {f["path"]: f["sha256"] for f in m["outputs"]}


def test_minimal_simulate(tmp_path):
    out = tmp_path / "o"
    assert main(["simulate", "--config", _write(tmp_path, MINIMAL), "--out", str(out)]) == EXIT_OK
    files = sorted(p.name for p in out.iterdir())
    assert files == ["drift_truth.csv", "manifest.json", "stack.smfs", "truth.json"]
    assert verify_manifest(out) == []
    m = json.loads((out / "manifest.json").read_text())
    assert m["seed"] == 3 and m["command"] == "simulate" and m["config"]["sample"]["nc_radius_nm"] == 300.0
    stack = read_smfs(out / "stack.smfs")
    assert len(stack) == m["result"]["frames"]
    with open(out / "drift_truth.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["frame", "dx_nm", "dy_nm"] and len(rows) == len(stack) + 1


def test_same_seed_same_digests(tmp_path):
    cfg = _write(tmp_path, MINIMAL)
    for name in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / name), "--threads", "2"]) == EXIT_OK
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "4"]) == EXIT_OK
    assert _digests(tmp_path / "a") == _digests(tmp_path / "b")
    assert _digests(tmp_path / "a")["stack.smfs"] != _digests(tmp_path / "c")["stack.smfs"]


def test_analyze_outputs_parse_back(tmp_path):
    cfg = _write(tmp_path, MINIMAL)
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", cfg, "--out", str(sim)]) == EXIT_OK
    out = tmp_path / "an"
    assert main(["analyze", "--config", cfg, "--out", str(out), "--stack", str(sim / "stack.smfs")]) == EXIT_OK
    assert verify_manifest(out) == []
    recs = read_catalog_csv(out / "catalog.csv")
    from smforge.analysis.records import catalog_from_json

    js = catalog_from_json((out / "catalog.json").read_text())
    assert [(r.id, r.x, r.y, r.f0) for r in recs] == [(r.id, r.x, r.y, r.f0) for r in js]
    for p in out.glob("*.json"):
        json.loads(p.read_text())
    for p in out.glob("*.csv"):
        with open(p) as fh:
            rows = list(csv.reader(fh))
        assert all(len(r) == len(rows[0]) for r in rows)


def test_saturation_noiseless_roundtrip(tmp_path, scenario_path, capsys):
    cfg = json.loads(open(scenario_path("fig4_saturation")).read())
    cfg["instrument"]["saturation"]["scan"]["noise"] = False
    cfg["tolerances"] = {"saturation_rel": 1e-6}
    out = tmp_path / "rt"
    assert main(["roundtrip", "--config", _write(tmp_path, cfg), "--out", str(out)]) == EXIT_OK
    assert "PASS saturation_e0" in capsys.readouterr().out
    rep = json.loads((out / "report.json").read_text())
    fit = rep["details"]["saturation"][0]["fit"]
    assert fit["f_inf"] == pytest.approx(257.0, rel=1e-6)
    assert fit["p_sat"] == pytest.approx(3.6, rel=1e-6)
    assert fit["gamma0"] == pytest.approx(41.0, rel=1e-6)


def test_saturate_writes_traces(tmp_path, scenario_path):
    out = tmp_path / "s"
    assert main(["saturate", "--config", scenario_path("fig4_saturation"), "--out", str(out)]) == EXIT_OK
    traces = read_traces_csv(out / "saturation_e0_p3.csv")
    assert len(traces) == 1 and traces[0].freq.size > 100


def test_roundtrip_failure_exit_4(tmp_path, scenario_path):
    cfg = json.loads(open(scenario_path("fig4_saturation")).read())
    cfg["tolerances"] = {"saturation_rel": 1e-12}
    out = tmp_path / "rt"
    assert main(["roundtrip", "--config", _write(tmp_path, cfg), "--out", str(out)]) == EXIT_ACCEPTANCE
    assert json.loads((out / "report.json").read_text())["pass"] is False


def test_config_errors_exit_2(tmp_path, capsys):
    bad = dict(MINIMAL, sample={"grdi": [1, 1]})
    out = tmp_path / "o"
    assert main(["simulate", "--config", _write(tmp_path, bad), "--out", str(out)]) == EXIT_CONFIG
    err = json.loads(capsys.readouterr().err)
    assert err["errors"][0]["loc"] == "sample.grdi"
    assert not out.exists() or list(out.iterdir()) == []
    assert main(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(out)]) == EXIT_CONFIG


def test_format_error_exit_3_fails_closed(tmp_path, capsys):
    cfg = _write(tmp_path, MINIMAL)
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", cfg, "--out", str(sim)]) == EXIT_OK
    broken = tmp_path / "broken.smfs"
    broken.write_bytes((sim / "stack.smfs").read_bytes()[:-7])
    out = tmp_path / "an"
    assert main(["analyze", "--config", cfg, "--out", str(out), "--stack", str(broken)]) == EXIT_FORMAT
    assert "offset" in json.loads(capsys.readouterr().err)["msg"]
    assert list(out.iterdir()) == []


def test_threads_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("SMFORGE_THREADS", "3")
    out = tmp_path / "o"
    assert main(["simulate", "--config", _write(tmp_path, MINIMAL), "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "manifest.json").read_text())["threads"] == 3
    assert main(["simulate", "--config", _write(tmp_path, MINIMAL), "--out", str(out), "--threads", "1"]) == EXIT_OK
    assert json.loads((out / "manifest.json").read_text())["threads"] == 1


def test_console_entry_point(tmp_path):
    env = dict(os.environ, SMFORGE_THREADS="1")
    r = subprocess.run([sys.executable, "-m", "smforge.cli", "--version"], capture_output=True, text=True, env=env)
    assert r.returncode == 0 and r.stdout.startswith("smforge ")

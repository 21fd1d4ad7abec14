import csv
import json
import pytest

from unstable_lab import cli, harness
from unstable_lab.config import ExperimentConfig, apply_overrides

pytestmark = pytest.mark.filterwarnings("ignore:BLV spin-up did not converge")

SMALL = ["--set", "model.K=2600", "--set", "model.spinup_steps=200", "--set", "lyapunov.spinup=300",
         "--set", "filter.spinup=100", "--set", "filter.K_avg=400", "--set", "psi.K=500",
         "--set", "bounds.max_window=100", "--set", "bounds.samples=10",
         "--set", 'filter.designs=[["blv",4],["blv",6],["random",4],["random",6],["full",10]]']


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.setenv("UNSTABLE_LAB_CACHE", str(tmp_path / "cache"))
    return tmp_path


def run(env, *args, out="out"):
    return cli.main([*args, "--out", str(env / out), *SMALL])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_smoke_simulate_emits_manifest(env):
    assert cli.main(["simulate", "--out", str(env / "o"), "--set", "model.K=10",
                     "--set", "model.spinup_steps=10", "--set", "lyapunov.spinup=2"]) == 0
    manifests = list((env / "cache").glob("simulate-*.json"))
    assert len(manifests) == 1
    m = json.loads(manifests[0].read_text())
    assert {"config_hash", "artifacts", "format_version", "created", "software_version"} <= set(m)


def test_simulate_is_cached(env, caplog):
    assert run(env, "simulate") == 0
    manifest = next((env / "cache").glob("simulate-*.json"))
    before = manifest.read_text()
    caplog.set_level("INFO", logger="unstable_lab")
    assert run(env, "simulate") == 0
    assert manifest.read_text() == before
    assert any("cache hit" in r.message for r in caplog.records)
    assert run(env, "simulate", "--seed", "4") == 0
    assert len(list((env / "cache").glob("simulate-*.bin"))) == 2


def test_corrupt_cache_regenerates(env):
    assert run(env, "simulate") == 0
    path = next((env / "cache").glob("simulate-*.bin"))
    path.write_bytes(path.read_bytes()[:100])
    with pytest.warns(RuntimeWarning):
        assert run(env, "simulate") == 0
    cfg = apply_overrides(ExperimentConfig(), SMALL[1::2])
    assert len(harness.cmd_simulate(cfg)) == 2600


def test_full_pipeline(env):
    for cmd in ("lyapunov", "psi", "benchmark", "bounds"):
        assert run(env, cmd) == 0
    out = env / "out"
    spec = read_csv(out / "spectrum.csv")
    assert list(spec[0]) == ["i", "lambda_per_step", "lambda_per_time", "flv_lambda_per_step",
                             "flv_lambda_per_time"]
    assert len(spec) == 10
    for r in spec:
        assert float(r["lambda_per_time"]) == pytest.approx(float(r["lambda_per_step"]) / 0.1)
    lyap = json.loads((out / "lyapunov.json").read_text())
    psi_rows = read_csv(out / "psi.csv")
    n0 = lyap["n0"]
    assert list(psi_rows[0]) == ["k"] + [f"psi_{i}" for i in range(n0 + 1, 11)]
    assert len(psi_rows) == 501
    assert all(float(v) >= 1 for r in psi_rows for k, v in r.items() if k != "k")
    summary = json.loads((out / "psi.json").read_text())
    assert summary["psi_min"] >= 1
    assert f"lle_std_{n0 + 1}" in summary
    lle_rows = read_csv(out / "lle.csv")
    assert list(lle_rows[0]) == ["k"] + [f"lle_{i}" for i in range(1, 11)]
    bench = read_csv(out / "benchmark.csv")
    assert list(bench[0]) == ["kind", "d", "mean_frobenius"]
    kinds = {(r["kind"], int(r["d"])) for r in bench}
    assert ("full", 10) in kinds and (f"psi_{n0 + 1}", 0) in kinds
    cell = read_csv(out / "cells" / "blv_d4.csv")
    assert list(cell[0]) == ["k", "frobenius", "alpha_running", "beta_running"]
    assert len(cell) == 500
    bounds = json.loads((out / "bounds.json").read_text())
    assert bounds["criterion_full"]["satisfied"]
    assert bounds["criterion_unobserved"]["unbounded_growth_flag"]
    margins = read_csv(out / "sandwich.csv")
    assert min(float(r["lower_margin"]) / float(r["scale"]) for r in margins) >= -1e-8
    assert min(float(r["upper_margin"]) / float(r["scale"]) for r in margins) >= -1e-8

    assert run(env, "report") == 0
    report = json.loads((out / "report.json").read_text())
    first = (out / "report.json").read_bytes()
    assert report["checks"]["criterion_full_satisfied"] is True
    assert run(env, "report") == 0
    assert (out / "report.json").read_bytes() == first

    # a second end-to-end run into a fresh directory reproduces every CSV
    for cmd in ("lyapunov", "psi", "benchmark", "bounds"):
        assert run(env, cmd, out="again") == 0
    for name in ("spectrum.csv", "psi.csv", "lle.csv", "benchmark.csv", "sandwich.csv"):
        assert (out / name).read_bytes() == (env / "again" / name).read_bytes()


def test_benchmark_parallel_matches_serial(env):
    assert run(env, "benchmark") == 0
    serial = (env / "out" / "benchmark.csv").read_bytes()
    assert run(env, "benchmark", "--jobs", "2", out="par") == 0
    assert (env / "par" / "benchmark.csv").read_bytes() == serial


def test_report_marks_missing_stages(env):
    assert run(env, "report") == 0
    report = json.loads((env / "out" / "report.json").read_text())
    assert report["psi"] == "not run"
    assert report["checks"]["sandwich_ok"] == "not run"
    assert "not run" in (env / "out" / "report.txt").read_text()


def test_report_fails_on_required_check(env):
    out = env / "out"
    out.mkdir()
    (out / "psi.json").write_text(json.dumps({"psi_min": 0.5}))
    assert run(env, "report") == 1
    assert run(env, "report", "--set", "required=[]") == 0


def test_bad_override_is_reported(env, capsys):
    assert cli.main(["simulate", "--set", "model.bogus=1"]) == 2
    assert "error" in capsys.readouterr().err

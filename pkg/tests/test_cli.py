import csv
import json

import numpy as np
import pytest
import yaml

from dadvi.cli import dumps_json, main, parse_config, serialize_config
from dadvi.errors import InvalidConfiguration

QUAD = """
model: {name: quadratic, params: {A: [[2, 1], [1, 2]], B: [0, 0]}}
N: 30
seed: 42
quantities:
  - {kind: coordinate, index: 0}
  - {kind: constant, value: 3}
"""


@pytest.fixture
def quad_config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(QUAD)
    return path


def test_config_roundtrip():
    cfg = parse_config(QUAD)
    assert parse_config(serialize_config(cfg)) == cfg
    assert serialize_config(parse_config(serialize_config(cfg))) == serialize_config(cfg)


@pytest.mark.parametrize(
    "text",
    ["bogus: 1", "model: {name: quadratic, extra: 1}", "optimizer: {nope: 1}", "model: {name: unknown}", "N: 0", "N: -3"],
)
def test_config_rejects(text):
    with pytest.raises(InvalidConfiguration):
        parse_config(text)


def test_fit_writes_artifacts_and_is_deterministic(tmp_path, quad_config):
    out = tmp_path / "out"
    assert main(["fit", str(quad_config), "--output-dir", str(out)]) == 0
    first = (out / "fit.json").read_bytes(), (out / "trace.csv").read_bytes()
    assert main(["fit", str(quad_config), "--output-dir", str(out)]) == 0
    assert first == ((out / "fit.json").read_bytes(), (out / "trace.csv").read_bytes())
    fit = json.loads(first[0])
    for key in ("eta_hat", "objective", "grad_norm", "converged", "eval_counts", "seed", "N", "config"):
        assert key in fit
    assert fit["seed"] == 42 and fit["N"] == 30 and fit["converged"]
    header = next(csv.reader((out / "trace.csv").open()))
    assert header == ["method", "step", "cumulative_evaluations", "objective", "grad_norm"]


def test_invalid_draw_count_exit_2(tmp_path, quad_config, capsys):
    out = tmp_path / "out"
    assert main(["fit", str(quad_config), "--set", "N=0", "--output-dir", str(out)]) == 2
    assert "invalid draw count" in capsys.readouterr().err
    assert not out.exists()


def test_hierarchical_fit(tmp_path):
    out = tmp_path / "h"
    rc = main(["fit", "--set", "model.name=hierarchical", "--set", "model.params.P=100", "--output-dir", str(out)])
    fit = json.loads((out / "fit.json").read_text())
    assert rc == 0 and fit["grad_norm"] <= 1e-8 and fit["eval_counts"]["hvp"] > 0


def test_nonconverged_fit_exit_1_and_postprocess_refuses(tmp_path):
    out = tmp_path / "nc"
    args = ["--set", "model.name=hierarchical", "--set", "optimizer.max_iter=2", "--output-dir", str(out)]
    assert main(["fit", *args]) == 1
    assert (out / "fit.json").exists()
    assert main(["postprocess", *args]) == 1
    assert not (out / "qoi_report.json").exists()


def test_postprocess_quadratic(tmp_path, quad_config):
    out = tmp_path / "pp"
    assert main(["fit", str(quad_config), "--output-dir", str(out), "--set", "optimizer.gtol=1e-10"]) == 0
    assert main(["postprocess", str(quad_config), "--output-dir", str(out)]) == 0
    rep = json.loads((out / "qoi_report.json").read_text())
    rows = {r["name"]: r for r in rep["quantities"]}
    assert rows["theta[0]"]["lr_sd"] == pytest.approx(np.sqrt(2 / 3), abs=1e-6)
    assert rows["constant"]["mc_se"] == 0 and rows["constant"]["se_flag"] is False
    assert rep["config"]["seed"] == 42


def test_postprocess_whitened_mf_sd(tmp_path):
    # With the CLI's raw draws mf_sd is the fitted sigma; 1/sqrt(2) holds for whitened draws (see test_posterior).
    out = tmp_path / "pp"
    cfg = ["--set", "model.params={A: [[2, 1], [1, 2]]}", "--set", "quantities=[{kind: coordinate, index: 0}]", "--output-dir", str(out)]
    assert main(["fit", *cfg]) == 0 and main(["postprocess", *cfg]) == 0
    fit = json.loads((out / "fit.json").read_text())
    row = json.loads((out / "qoi_report.json").read_text())["quantities"][0]
    assert row["mf_sd"] == pytest.approx(np.exp(fit["eta_hat"]["xi"][0]), rel=1e-12)


def test_experiment_degeneracy(tmp_path):
    out = tmp_path / "d"
    rc = main(["experiment", "--set", "experiment={name: degeneracy, params: {D: 10, N: 3}}", "--output-dir", str(out)])
    assert rc == 0
    rows = list(csv.DictReader((out / "degeneracy.csv").open()))
    obj = [float(r["objective"]) for r in rows]
    assert all(b < a for a, b in zip(obj, obj[1:]))
    summary = json.loads((out / "degeneracy.json").read_text())
    assert summary["config"]["experiment"]["name"] == "degeneracy" and "experiment_seed" in summary


def test_experiment_coverage_rows(tmp_path):
    out = tmp_path / "c"
    rc = main(
        [
            "experiment",
            "--set",
            "model.name=quadratic-1d",
            "--set",
            "experiment={name: coverage, params: {replications: 5, reference_replications: 5}}",
            "--output-dir",
            str(out),
        ]
    )
    assert rc == 0
    rows = list(csv.DictReader((out / "coverage.csv").open()))
    assert len(rows) == 5 * 4


def test_experiment_trace_shares_z_indep(tmp_path):
    out = tmp_path / "t"
    rc = main(["experiment", "--set", "model.name=quadratic-1d", "--set", "experiment.name=trace", "--output-dir", str(out)])
    assert rc == 0
    rows = list(csv.DictReader((out / "trace_comparison.csv").open()))
    assert {r["method"] for r in rows} == {"dadvi", "sg"}
    assert len({r["z_indep"] for r in rows}) == 1


def test_unknown_experiment_exit_2(tmp_path):
    assert main(["experiment", "--set", "experiment.name=nope", "--output-dir", str(tmp_path / "x")]) == 2


def test_json_floats_17_digits():
    text = dumps_json({"a": 0.1, "b": [1.0, 2], "c": None, "d": True})
    assert '"a": 0.10000000000000001' in text
    assert json.loads(text) == {"a": 0.1, "b": [1.0, 2], "c": None, "d": True}


def test_workers_invariance(tmp_path, quad_config):
    outs = []
    for w in (1, 3):
        out = tmp_path / f"w{w}"
        assert main(["fit", str(quad_config), "--set", f"workers={w}", "--output-dir", str(out)]) == 0
        outs.append(json.loads((out / "fit.json").read_text())["eta_hat"])
    np.testing.assert_allclose(outs[0]["mu"] + outs[0]["xi"], outs[1]["mu"] + outs[1]["xi"], atol=1e-6)


def test_module_entry_point(tmp_path, quad_config):
    import subprocess
    import sys

    out = tmp_path / "m"
    res = subprocess.run([sys.executable, "-m", "dadvi", "fit", str(quad_config), "--output-dir", str(out)])
    assert res.returncode == 0 and (out / "fit.json").exists()
    assert yaml.safe_load(serialize_config(parse_config(QUAD)))["N"] == 30

import filecmp
import json
import os

import numpy as np
import pandas as pd
import pytest

from app.brw.analysis import TailFit
from app.brw.errors import ConfigError
from app.cli import main
from app.harness.acceptance import verify
from app.harness.config import (
    OUTPUT_ROOT_ENV,
    WORKERS_ENV,
    ModelBlock,
    config_hash,
    load_config,
    parse_config,
)
from app.harness.core import ExperimentRunner, PhiReport, RunManifest, phi_report, run_fit

SMALL = {"engine": {"n": 4, "xs": [1.0], "replicas": 20}}


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    monkeypatch.delenv(WORKERS_ENV, raising=False)


def _runner(tmp_path, **overrides):
    data = {**SMALL, "output_dir": str(tmp_path)}
    return ExperimentRunner(parse_config(data, overrides))


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="Invalid experiment config"):
        parse_config({"engine": {"replica": 10}})
    with pytest.raises(ConfigError):
        parse_config({"colour": "blue"})


def test_overrides_skip_none():
    config = parse_config(SMALL, {"engine.replicas": 7, "seed": None})
    assert config.engine.replicas == 7
    assert config.seed == 0
    assert SMALL["engine"]["replicas"] == 20


def test_environment_overrides(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    monkeypatch.setenv(WORKERS_ENV, "3")
    config = parse_config({"output_dir": "run1"})
    assert config.output_dir == os.path.join(str(tmp_path), "run1")
    assert config.workers == 3
    monkeypatch.setenv(WORKERS_ENV, "many")
    with pytest.raises(ConfigError, match="must be an integer"):
        parse_config({})


def test_infeasible_model_block_is_a_config_error():
    with pytest.raises(ConfigError, match="does not calibrate"):
        parse_config({"model": {"family": "gaussian", "regime": "subcritical", "sigma2": 2.0}})


def test_derivative_column_needs_boundary_model():
    data = {
        "model": {"family": "lattice", "regime": "subcritical", "a": 1.0},
        "analysis": {"column": "D"},
    }
    with pytest.raises(ConfigError, match="boundary models"):
        parse_config(data)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "missing.json"))
    bad = tmp_path / "list.json"
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        load_config(str(bad))
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(ConfigError, match="Failed to read config"):
        load_config(str(broken))


def test_load_config_from_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 9, "engine": {"n": 3}}))
    config = load_config(str(path), {"engine.replicas": 11})
    assert (config.seed, config.engine.n, config.engine.replicas) == (9, 3, 11)


def test_config_hash_ignores_location_and_workers():
    first = parse_config({"output_dir": "a", "workers": 1})
    second = parse_config({"output_dir": "b", "workers": 4})
    third = parse_config({"seed": 1})
    assert config_hash(first) == config_hash(second)
    assert config_hash(first) != config_hash(third)


def test_phi_report_residuals():
    report = phi_report(ModelBlock(family="gaussian", regime="subcritical", sigma2=1.0), [0.0, 1.0])
    assert [row.theta for row in report.rows] == [0.0, 1.0]
    assert abs(report.residuals["phi_1"]) < 1e-12
    assert abs(report.residuals["phi_kappa"]) < 1e-10
    assert report.residuals["phi_prime_1"] < 0


def test_models_with_model_prefixed_fields():
    for cls in (RunManifest, PhiReport, TailFit):
        assert cls.model_config["protected_namespaces"] == ()
    manifest = RunManifest(config_hash="c", model_hash="m", seed=1)
    assert manifest.model_dump()["model_hash"] == "m"


def test_renewal_stage_writes_table(tmp_path):
    runner = _runner(tmp_path)
    result = runner.run_renewal()
    assert result.ok, result.message
    assert result.summary["exact"] and result.summary["harmonic"]
    frame = pd.read_csv(result.outputs["renewal"])
    assert list(frame.columns) == ["u", "R", "exact_flag"]
    assert os.path.exists(tmp_path / "index.json")
    again = _runner(tmp_path).renewal()
    assert again.exact
    assert runner.manifest.renewal_hash is not None


def test_simulate_stage_and_manifest(tmp_path):
    result = _runner(tmp_path).run_simulate()
    assert result.ok, result.message
    frame = pd.read_csv(result.outputs["snapshots"])
    assert len(frame) == 20
    with open(tmp_path / "manifest.json") as f:
        manifest = json.load(f)
    assert manifest["schema_version"] == 1
    assert "simulate" in manifest["stage_seeds"]
    assert "engine-1" in manifest["certificates"]


def test_simulate_is_independent_of_workers(tmp_path):
    first = _runner(tmp_path / "one", workers=1).run_simulate()
    second = _runner(tmp_path / "two", workers=2).run_simulate()
    assert first.ok and second.ok
    assert filecmp.cmp(first.outputs["snapshots"], second.outputs["snapshots"], shallow=False)


def test_untruncated_simulation(tmp_path):
    runner = ExperimentRunner(parse_config(
        {"engine": {"n": 4, "killing": False, "replicas": 10}, "output_dir": str(tmp_path)}
    ))
    result = runner.run_simulate()
    assert result.ok, result.message
    assert result.summary["summaries"][0]["target_W"] == 1.0


def test_failed_stage_names_itself(tmp_path):
    runner = _runner(tmp_path)

    def broken():
        raise ValueError("bad input")

    result = runner.run_stage("broken", broken)
    assert not result.ok
    assert result.message == "broken: bad input"
    assert "broken" not in runner.manifest.stage_seeds


def test_spine_stage_needs_killing(tmp_path):
    runner = ExperimentRunner(parse_config(
        {"engine": {"n": 3, "killing": False, "replicas": 10}, "output_dir": str(tmp_path)}
    ))
    result = runner.run_spine_tail()
    assert not result.ok
    assert result.message.startswith("spine-tail:")


def test_run_fit_missing_input_writes_nothing(tmp_path):
    out = tmp_path / "fit_out"
    result = run_fit(str(tmp_path / "missing.csv"), "D_trunc", "exponential", str(out))
    assert not result.ok
    assert "not found" in result.message
    assert not out.exists()


def test_run_fit_writes_json(tmp_path):
    samples = np.random.default_rng(0).exponential(0.5, 50_000)
    path = tmp_path / "samples.csv"
    pd.DataFrame({"W_trunc": samples}).to_csv(path, index=False)
    result = run_fit(str(path), "W_trunc", "exponential", str(tmp_path), bootstrap=10)
    assert result.ok, result.message
    assert os.path.exists(result.outputs["fit"])
    assert result.summary["rate_or_index"] == pytest.approx(2.0, rel=0.15)


def test_cli_phi(capsys):
    assert main(["phi", "--theta", "1.0"]) == 0
    assert "lattice" in capsys.readouterr().out
    code = main(["phi", "--family", "gaussian", "--regime", "subcritical", "--sigma2", "2.0"])
    assert code == 1
    assert "calibration failed" in capsys.readouterr().err


def test_cli_fit_missing_input(tmp_path, capsys):
    out = tmp_path / "cli_fit"
    code = main(["fit", "--input", str(tmp_path / "nope.csv"), "--output-dir", str(out)])
    assert code == 1
    assert "error in stage fit" in capsys.readouterr().err
    assert not out.exists()


def test_cli_simulate(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL))
    out = tmp_path / "cli_run"
    assert main(["simulate", str(path), "--replicas", "5", "--output-dir", str(out)]) == 0
    assert len(pd.read_csv(out / "snapshots.csv")) == 5


def test_cli_rejects_bad_config(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"engine": {"bogus": 1}}))
    assert main(["renewal", str(path), "--output-dir", str(tmp_path)]) == 1
    assert "error in stage config" in capsys.readouterr().err


def test_cli_verify_unknown_criterion():
    with pytest.raises(SystemExit):
        main(["verify", "AC99"])


def test_verify_rejects_unknown_criterion():
    with pytest.raises(ValueError, match="Unknown criterion"):
        verify("AC0")
    with pytest.raises(ValueError, match="Scale must be positive"):
        verify("AC1", scale=0.0)


def test_verify_determinism_criterion(tmp_path):
    result = verify("AC14", scale=0.1, seed=3, workers=2, output_dir=str(tmp_path))
    assert result.passed, result.details
    assert result.details["identical"]

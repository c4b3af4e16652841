import json

import numpy as np
import pytest

from lossgsa import fileio
from lossgsa.cli import main
from lossgsa.config import RunConfig
from lossgsa.errors import ConfigError, GSAError
from lossgsa.pipeline import EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_OK, cmd_calibrate, cmd_probe_c, cmd_run

import oracles


def quadratic_config(out, **extra):
    data = {
        "model": {"name": "quadratic", "params": {"diag": [1.0, 2.0]}},
        "init": [1.0, 1.0],
        "seed": 5,
        "calibration": {"c": 0.1, "delta_override": 2.0, "optimizer_budget": 0, "mc_samples_for_M": 200},
        "sampler": {"n_chains": 2, "chain_length": 2000},
        "output_dir": str(out),
        "plots": False,
    }
    for key, value in extra.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return data


def synthetic_config(out, **extra):
    data = {
        "model": {"name": "synthetic"},
        "seed": 2,
        "calibration": {"c": 0.1, "nu": 0.2, "mc_samples_for_M": 200, "schedule": [1000], "tolerance": 0.05},
        "sampler": {"n_chains": 2, "chain_length": 1000},
        "output_dir": str(out),
        "threads": 1,
    }
    data.update(extra)
    return data


def write_config(path, data):
    path.write_text(json.dumps(data))
    return str(path)


# -- probe-c ---------------------------------------------------------------


def test_probe_zero_width(tmp_path):
    cfg = RunConfig.from_dict(synthetic_config(tmp_path / "out", plots=False))
    cmd_probe_c(cfg, [0.0])
    d = tmp_path / "out" / "probe_c" / "c_0.0"
    ref = np.loadtxt(d / "reference.csv", delimiter=",", skiprows=1)
    for k in range(20):
        np.testing.assert_array_equal(np.loadtxt(d / f"draw_{k:03d}.csv", delimiter=",", skiprows=1), ref)


def test_probe_synthetic_files(tmp_path):
    cfg = RunConfig.from_dict(synthetic_config(tmp_path / "out"))
    files = cmd_probe_c(cfg, [0.1])
    d = tmp_path / "out" / "probe_c" / "c_0.1"
    draws = sorted(d.glob("draw_*.csv"))
    assert len(draws) == 20
    for f in draws:
        assert np.loadtxt(f, delimiter=",", skiprows=1).shape == (225, 3)
    assert (d / "probe.png").exists() and d / "probe.png" in files


def test_probe_without_outputs_writes_losses(tmp_path):
    cfg = RunConfig.from_dict(quadratic_config(tmp_path / "out"))
    cmd_probe_c(cfg, [0.2])
    losses = np.loadtxt(tmp_path / "out" / "probe_c" / "c_0.2" / "losses.csv", delimiter=",", skiprows=1)
    assert losses.shape == (20, 2)


def test_probe_empty_candidates(tmp_path):
    cfg = RunConfig.from_dict(synthetic_config(tmp_path / "out"))
    with pytest.raises(GSAError) as info:
        cmd_probe_c(cfg, [])
    assert isinstance(info.value.__cause__, ConfigError)
    assert main(["probe-c", "--config", write_config(tmp_path / "c.json", synthetic_config(tmp_path / "o"))]) == EXIT_ERROR


# -- calibrate -------------------------------------------------------------


def test_missing_c_points_to_probe(tmp_path):
    data = synthetic_config(tmp_path / "out")
    del data["calibration"]["c"]
    with pytest.raises(GSAError, match="probe-c") as info:
        cmd_calibrate(RunConfig.from_dict(data))
    assert isinstance(info.value.__cause__, ConfigError)


def test_nu_zero_gives_zero_lambda(tmp_path):
    data = quadratic_config(tmp_path / "out")
    _, path = cmd_calibrate(RunConfig.from_dict(data))
    payload = json.loads(path.read_text())
    assert payload["lam"] == 0.0
    assert payload["M_lambda"] == payload["M"]
    assert payload["config"]["seed"] == 5


def test_calibrate_quadratic_closed_form(tmp_path):
    data = quadratic_config(tmp_path / "out")
    data["model"]["params"]["diag"] = [1.0]
    data["init"] = [1.0]
    data["calibration"] = {"c": 0.1, "optimizer_budget": 0, "mc_samples_for_M": 5000}
    data["sampler"] = {"target_acceptance": 0.44, "burn_in_fraction": 0.1}
    with pytest.warns(RuntimeWarning):
        res, _ = cmd_calibrate(RunConfig.from_dict(data))
    # closed-form probability at the returned temperature sits within the solver tolerance
    assert abs(oracles.quadratic_Delta(res.delta, res.M) - 0.99) <= 0.005 + 0.002


# -- run / exit codes ------------------------------------------------------


def test_smoke_run(tmp_path):
    code = main(["run", "--config", write_config(tmp_path / "c.json", synthetic_config(tmp_path / "out"))])
    out = tmp_path / "out"
    assert code in (EXIT_OK, EXIT_NOT_CONVERGED)
    for i in range(2):
        assert np.loadtxt(out / "chains" / f"chain_{i:03d}.csv", delimiter=",", skiprows=1).shape == (1000, 8)
    for name in ["sensitivities.csv", "perturbation_curves.csv", "correlations.csv", "psrf.csv", "report.json",
                 "manifest.json", "figures/sensitivities.png", "figures/trace_regularized_loss.png"]:
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert report["chains"]["n_chains"] == 2


def test_manifest_inventory_is_complete(tmp_path):
    out = tmp_path / "out"
    code, manifest = cmd_run(RunConfig.from_dict(synthetic_config(out)))
    listed = {f["path"] for f in manifest["files"]} | {"manifest.json"}
    present = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()}
    assert listed == present
    for f in manifest["files"]:
        assert fileio.sha256(out / f["path"]) == f["sha256"]
    assert manifest["exit_code"] == code
    assert manifest["seeds"]["base"] == 2 and len(manifest["seeds"]["chains"]) == 2


def test_single_chain_is_warning_exit(tmp_path):
    data = quadratic_config(tmp_path / "out", sampler={"n_chains": 1})
    code = main(["run", "--config", write_config(tmp_path / "c.json", data)])
    assert code == EXIT_NOT_CONVERGED
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["psrf"]["available"] is False
    assert not (tmp_path / "out" / "psrf.csv").exists()


def test_converged_quadratic_exit_ok(tmp_path):
    data = quadratic_config(tmp_path / "out", sampler={"chain_length": 20_000, "target_acceptance": 0.3})
    assert main(["run", "--config", write_config(tmp_path / "c.json", data)]) == EXIT_OK


def test_psrf_threshold_flag(tmp_path):
    data = quadratic_config(tmp_path / "out")
    argv = ["run", "--config", write_config(tmp_path / "c.json", data), "--psrf-threshold", "0.5"]
    assert main(argv) == EXIT_NOT_CONVERGED


@pytest.mark.parametrize("text", ["{not json", json.dumps({"model": "quadratic", "bogus": 1}),
                                  json.dumps({"model": "quadratic", "calibration": {"c": -1}})])
def test_invalid_config_no_outputs(tmp_path, text, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(text)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_ERROR
    assert not out.exists()
    assert "error:" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "absent.json")]) == EXIT_ERROR


def test_stage_attribution(tmp_path, capsys):
    data = quadratic_config(tmp_path / "out")
    assert main(["sample", "--config", write_config(tmp_path / "c.json", data)]) == EXIT_ERROR
    assert "[sample]" in capsys.readouterr().err


def test_subcommands_in_sequence(tmp_path):
    cfg = write_config(tmp_path / "c.json", quadratic_config(tmp_path / "out"))
    assert main(["calibrate", "--config", cfg]) == EXIT_OK
    assert main(["sample", "--config", cfg, "--chains", "3"]) == EXIT_OK
    assert main(["analyze", "--config", cfg]) in (EXIT_OK, EXIT_NOT_CONVERGED)
    meta = json.loads((tmp_path / "out" / "chains" / "chains_meta.json").read_text())
    assert meta["n_chains"] == 3


def test_analyze_dimension_mismatch(tmp_path):
    cfg = write_config(tmp_path / "c.json", quadratic_config(tmp_path / "out"))
    main(["run", "--config", cfg])
    other = quadratic_config(tmp_path / "out")
    other["model"]["params"]["diag"] = [1.0, 2.0, 3.0]
    assert main(["analyze", "--config", write_config(tmp_path / "d.json", other)]) == EXIT_ERROR


def test_determinism(tmp_path):
    runs = []
    for name in ("a", "b"):
        cfg = RunConfig.from_dict(synthetic_config(tmp_path / name))
        cmd_run(cfg)
        runs.append(tmp_path / name)
    csvs = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*.csv"))
    assert csvs
    for rel in csvs:
        assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes(), rel


# -- configuration ---------------------------------------------------------


def test_output_dir_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("GSA_OUT", str(tmp_path / "env"))
    cfg = RunConfig.from_dict({"model": "quadratic", "calibration": {"c": 0.1}})
    assert cfg.out_dir() == tmp_path / "env"
    cfg.output_dir = str(tmp_path / "file")
    assert cfg.out_dir() == tmp_path / "file"
    cfg.apply_overrides(out=tmp_path / "flag")
    assert cfg.out_dir() == tmp_path / "flag"
    monkeypatch.delenv("GSA_OUT")
    assert RunConfig.from_dict({"model": "quadratic", "calibration": {}}).out_dir().name == "gsa_out"


def test_env_fallback_end_to_end(tmp_path, monkeypatch):
    data = quadratic_config(None)
    del data["output_dir"]
    monkeypatch.setenv("GSA_OUT", str(tmp_path / "env"))
    assert main(["calibrate", "--config", write_config(tmp_path / "c.json", data)]) == EXIT_OK
    assert (tmp_path / "env" / "calibration.json").exists()


def test_flag_overrides():
    cfg = RunConfig.from_dict({"model": "quadratic", "calibration": {"c": 0.1}, "seed": 1})
    cfg.apply_overrides(seed=9, chains=4, samples=5000, nu=0.3, alpha=0.9, c=0.2, delta=1.5, threads=2)
    cal = cfg.calibration_config()
    smp = cfg.sampler_config()
    assert (cal.seed, cal.nu, cal.alpha, cal.c, cal.delta_override) == (9, 0.3, 0.9, 0.2, 1.5)
    assert (smp.seed, smp.n_chains, smp.chain_length, smp.threads) == (9, 4, 5000, 2)


def test_plugin_model_run(tmp_path):
    data = quadratic_config(tmp_path / "out")
    data["model"] = {"name": "test_models:PositiveOnly", "params": {"dim": 2}}
    data["calibration"]["optimizer_budget"] = 0
    assert main(["run", "--config", write_config(tmp_path / "c.json", data)]) in (EXIT_OK, EXIT_NOT_CONVERGED)
    for i in range(2):
        chain = np.loadtxt(tmp_path / "out" / "chains" / f"chain_{i:03d}.csv", delimiter=",", skiprows=1)
        assert np.all(chain > 0)

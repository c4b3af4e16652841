"""The calibrate -> sample -> analyze pipeline and its file outputs.

Layout of an output directory::

    calibration.json
    chains/chain_000.csv ... logq_traces.csv chains_meta.json
    sensitivities.csv perturbation_curves.csv correlations.csv psrf.csv report.json
    figures/*.png
    manifest.json            (run only)
    probe_c/c_<c>/...        (probe-c only)
"""

from __future__ import annotations

import datetime as _dt
import logging
import shutil
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, fileio, plotting
from .analysis import AnalysisResult, analyze
from .calibrate import CalibrationResult, calibrate, optimize_loss, sample_uniform_box
from .config import RunConfig
from .errors import ConfigError, GSAError
from .models import GibbsDensity, LossModel, load_model
from .sampler import ChainSet, read_chain_set, run_chain_set, write_chain_set

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2

CALIBRATION_FILE = "calibration.json"
CHAINS_DIR = "chains"
FIGURES_DIR = "figures"


class StageError(GSAError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.__cause__ = exc


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except (GSAError, ValueError, OSError) as exc:
                raise StageError(name, exc) from exc
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


def _model(config: RunConfig) -> LossModel:
    return load_model(config.model)


def _init(config: RunConfig, model: LossModel):
    if config.init is None:
        return model.default_init()
    init = np.asarray(config.init, dtype=float)
    if init.shape != (model.dim,):
        raise ConfigError(f"init has {init.size} entries, model dimension is {model.dim}")
    return init


# ---------------------------------------------------------------------------
# probe-c


@_stage("probe-c")
def cmd_probe_c(config: RunConfig, candidates: Sequence[float]) -> list:
    """Model outputs for uniform draws around the reference point, per candidate c.

    Writes ``probe_c/c_<c>/draw_XXX.csv`` (one table of model outputs per
    draw), ``reference.csv`` and ``draws.csv``. Models without an output
    surface get ``losses.csv`` instead.
    """
    if not candidates:
        raise ConfigError("no candidate values of c given")
    if any(c < 0 for c in candidates):
        raise ConfigError("candidate c values must be non-negative")
    model = _model(config)
    out = fileio.ensure_dir(config.out_dir() / "probe_c")
    cal_path = config.out_dir() / CALIBRATION_FILE
    if cal_path.exists():
        theta_star = CalibrationResult.from_dict(fileio.read_json(cal_path)).theta_star
    else:
        budget = int(config.calibration.get("optimizer_budget", 500))
        theta_star = optimize_loss(model, _init(config, model), budget).theta_star
    n_draws = int(config.probe.get("draws", 20))
    reference = model.predict_outputs(theta_star)
    written = []
    if reference is None:
        logger.warning("model %s has no prediction surface; writing loss values per draw instead", model.name)
    for ci, c in enumerate(candidates):
        cdir = fileio.ensure_dir(out / f"c_{c!r}")
        draws = sample_uniform_box(theta_star, c, n_draws, np.random.default_rng([config.seed, 11, ci]))
        written.append(fileio.write_matrix_csv(cdir / "draws.csv", model.param_names, draws))
        if reference is None:
            losses = model.loss_batch(draws)
            written.append(fileio.write_csv(cdir / "losses.csv", ["draw", "loss"], enumerate(losses.tolist())))
            continue
        columns, ref_table = reference
        written.append(fileio.write_matrix_csv(cdir / "reference.csv", columns, ref_table))
        tables = []
        for k, theta in enumerate(draws):
            _, table = model.predict_outputs(theta)
            tables.append(table)
            written.append(fileio.write_matrix_csv(cdir / f"draw_{k:03d}.csv", columns, table))
        if config.plots:
            written.append(plotting.probe_outputs(columns, tables, ref_table, cdir / f"probe.{plotting.FTYPE}"))
    return written


# ---------------------------------------------------------------------------
# calibrate


@_stage("calibrate")
def cmd_calibrate(config: RunConfig) -> tuple[CalibrationResult, Path]:
    cal_cfg = config.calibration_config()
    model = _model(config)
    result = calibrate(model, cal_cfg, config.sampler_config(), init=_init(config, model))
    out = fileio.ensure_dir(config.out_dir())
    payload = result.to_dict()
    payload["config"] = config.to_dict()
    payload["model"] = model.name
    path = fileio.write_json(out / CALIBRATION_FILE, payload)
    logger.info("calibration: M=%.6g lambda=%.6g delta=%.6g", result.M, result.lam, result.delta)
    return result, path


def load_calibration(path) -> CalibrationResult:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"calibration file {path} not found; run `lossgsa calibrate` first")
    return CalibrationResult.from_dict(fileio.read_json(path))


# ---------------------------------------------------------------------------
# sample


@_stage("sample")
def cmd_sample(config: RunConfig, calibration_path=None) -> tuple[ChainSet, list]:
    model = _model(config)
    cal = load_calibration(calibration_path or config.out_dir() / CALIBRATION_FILE)
    if cal.theta_star.shape != (model.dim,):
        raise ConfigError("calibration does not match the model dimension")
    if config.calibration.get("delta_override") is not None:
        cal.delta = float(config.calibration["delta_override"])
    density = GibbsDensity(model, cal.delta, cal.lam)
    chains = run_chain_set(density, cal, config.sampler_config())
    chains_dir = config.out_dir() / CHAINS_DIR
    try:
        written = write_chain_set(chains_dir, chains)
    except BaseException:
        shutil.rmtree(chains_dir, ignore_errors=True)
        raise
    logger.info("sampling: acceptance rates %s", np.round(chains.acceptance_rate, 3).tolist())
    return chains, written


# ---------------------------------------------------------------------------
# analyze


def _write_reports(out: Path, result: AnalysisResult, chains: ChainSet, plots: bool) -> list:
    rep = result.report
    names = rep.param_names
    written = []
    chain_cols = [f"S_chain_{i:03d}" for i in range(len(rep.per_chain_S))]
    header = ["parameter", "mean_abs_theta", "mean_abs_grad", "S", "S_normalized", "F_prime", "S_stderr_iid"]
    rows = []
    for k, name in enumerate(names):
        rows.append([name, rep.mean_abs_theta[k], rep.mean_abs_grad[k], rep.S[k], rep.S_normalized[k],
                     rep.F_prime[k], rep.S_stderr[k], *rep.per_chain_S[:, k].tolist()])
    written.append(fileio.write_csv(out / "sensitivities.csv", header + chain_cols, rows))

    curves = result.curves
    written.append(fileio.write_matrix_csv(out / "perturbation_curves.csv", ["h", *names],
                                           np.column_stack([curves.h_grid, curves.curves.T])))
    written.append(fileio.write_csv(out / "correlations.csv", ["parameter", *names],
                                    ([name, *result.correlations[k].tolist()] for k, name in enumerate(names))))
    diag = result.psrf
    if diag.available:
        written.append(fileio.write_csv(out / "psrf.csv", ["parameter", "psrf_theta", "psrf_grad"],
                                        ([n, diag.theta_psrf[k], diag.grad_psrf[k]] for k, n in enumerate(names))))
    report = {
        "sensitivity": rep.to_dict(),
        "perturbation": {"h_max": curves.h_max, "max_variation": float(curves.variation.max()),
                         "variation": dict(zip(names, curves.variation.tolist()))},
        "correlations": result.correlations,
        "psrf": diag.to_dict(names),
        "chains": {"n_chains": chains.n_chains, "chain_length": chains.chain_length, "burn_in": chains.burn_in,
                   "acceptance_rate": chains.acceptance_rate.tolist(), "seeds": [int(s) for s in chains.seeds]},
        "most_sensitive": names[int(np.argmax(rep.S))],
        "ranking": [names[k] for k in np.argsort(-rep.S, kind="stable")],
    }
    written.append(fileio.write_json(out / "report.json", report))

    if plots:
        figs = fileio.ensure_dir(out / FIGURES_DIR)
        ext = plotting.FTYPE
        written.append(plotting.sensitivity_bars(names, rep.S_normalized, rep.per_chain_S, figs / f"sensitivities.{ext}"))
        written.append(plotting.correlation_heatmap(names, result.correlations, figs / f"correlations.{ext}"))
        written.append(plotting.perturbation_plot(names, curves.h_grid, curves.curves, figs / f"perturbation_curves.{ext}"))
        reg = [-lq / rep.delta for lq in chains.log_q]
        written.append(plotting.trace_panels(reg, chains.burn_in, "regularized loss", figs / f"trace_regularized_loss.{ext}"))
        top = int(np.argmax(rep.S))
        written.append(plotting.trace_panels([c[:, top] for c in chains.chains], chains.burn_in, names[top],
                                             figs / f"trace_{names[top]}.{ext}"))
    return written


@_stage("analyze")
def cmd_analyze(config: RunConfig, chains_dir=None, calibration_path=None) -> tuple[AnalysisResult, int, list]:
    """Indices, robustness curves, correlations and PSRF from stored chains.

    Returns the exit code as well: ``EXIT_OK`` when every PSRF is below the
    threshold, ``EXIT_NOT_CONVERGED`` otherwise (including single-chain runs,
    where PSRF is unavailable). Reports are written either way.
    """
    model = _model(config)
    out = fileio.ensure_dir(config.out_dir())
    cal = load_calibration(calibration_path or out / CALIBRATION_FILE)
    if config.calibration.get("delta_override") is not None:
        cal.delta = float(config.calibration["delta_override"])
    chains = read_chain_set(chains_dir or out / CHAINS_DIR)
    if chains.dim != model.dim:
        raise ConfigError(f"chains have {chains.dim} columns but model {model.name} has dimension {model.dim}")
    result = analyze(model, chains, cal.delta, cal.lam, config.h_max, config.psrf_threshold, config.n_grid)
    written = _write_reports(out, result, chains, config.plots)
    if not result.psrf.available:
        logger.warning("PSRF unavailable: %s", result.psrf.note)
        code = EXIT_NOT_CONVERGED
    elif not result.psrf.passed:
        logger.warning("PSRF threshold %.3g exceeded (max %.4g)", config.psrf_threshold, result.psrf.max_psrf)
        code = EXIT_NOT_CONVERGED
    else:
        code = EXIT_OK
    return result, code, written


# ---------------------------------------------------------------------------
# run


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def cmd_run(config: RunConfig) -> tuple[int, dict]:
    """Calibrate, sample and analyze, then write ``manifest.json``."""
    started = _now()
    cal, cal_path = cmd_calibrate(config)
    chains, chain_files = cmd_sample(config)
    result, code, report_files = cmd_analyze(config)
    out = config.out_dir()
    files = [cal_path, *chain_files, *report_files]
    manifest = {
        "software": {"name": "lossgsa", "version": __version__},
        "config": config.to_dict(),
        "seeds": {"base": config.seed, "chains": [int(s) for s in chains.seeds]},
        "started": started,
        "finished": _now(),
        "exit_code": code,
        "files": [
            {"path": str(Path(p).relative_to(out)), "sha256": fileio.sha256(p), "bytes": Path(p).stat().st_size}
            for p in files
        ],
    }
    fileio.write_json(out / "manifest.json", manifest)
    return code, manifest

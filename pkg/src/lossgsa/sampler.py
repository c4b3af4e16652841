"""Adaptive random-walk Metropolis sampling of a Gibbs density.

The proposal is ``x + S u`` with ``u ~ N(0, I)``. After every step the
factor ``S`` is adapted so that the acceptance probability tracks a target
(robust adaptive Metropolis, Vihola 2012)::

    S' S'^T = S (I + eta_t (a_t - a*) v v^T) S^T,    v = u / |u|
    eta_t   = min(1, dim * t^-decay)

The right-hand side equals ``(S + k (S v) v^T)(...)^T`` with
``k = sqrt(1 + eta_t (a_t - a*)) - 1``, so the update is a rank-one
correction of ``S`` rather than a refactorization. ``S`` is a square root
of the proposal covariance but not necessarily triangular; the proposal
distribution only depends on ``S S^T``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fileio
from .errors import AlignmentError, DegenerateVarianceError, FeasibilityError, SamplerError, StallError
from .models import GibbsDensity

__all__ = [
    "SamplerConfig",
    "ChainRun",
    "ChainSet",
    "PsrfReport",
    "run_chain",
    "run_chain_set",
    "chain_seed",
    "overdispersed_inits",
    "psrf",
    "convergence_report",
    "write_chain_set",
    "read_chain_set",
]

STALL_LIMIT = 10_000


@dataclass
class SamplerConfig:
    n_chains: int = 5
    chain_length: int = 100_000
    target_acceptance: float = 0.15
    burn_in_fraction: float = 0.35
    decay: float = 0.66
    initial_scale: float = 0.05
    overdispersion_factor: float = 3.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not 0.05 < self.target_acceptance < 0.9:
            raise ValueError("target_acceptance must lie in (0.05, 0.9)")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ValueError("burn_in_fraction must lie in [0, 1)")
        if not 0.5 < self.decay <= 1.0:
            raise ValueError("decay exponent must lie in (0.5, 1]")
        if self.initial_scale <= 0:
            raise ValueError("initial_scale must be positive")
        if self.chain_length <= self.burn_in:
            raise ValueError("chain_length must exceed the burn-in count")

    @property
    def burn_in(self) -> int:
        return int(math.ceil(self.burn_in_fraction * self.chain_length))


@dataclass
class ChainRun:
    samples: np.ndarray
    log_q: np.ndarray
    acceptance_rate: float
    # geometric-mean proposal scale |det S|^(1/dim) after each step
    scale_trace: np.ndarray
    final_factor: np.ndarray


@dataclass
class ChainSet:
    chains: list
    log_q: list
    acceptance_rate: np.ndarray
    burn_in: int
    seeds: list
    param_names: list = field(default_factory=list)
    scale_traces: Optional[list] = None

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def chain_length(self) -> int:
        return self.chains[0].shape[0]

    @property
    def dim(self) -> int:
        return self.chains[0].shape[1]

    def retained(self, i: int) -> np.ndarray:
        return self.chains[i][self.burn_in:]

    def retained_chains(self) -> list:
        return [self.retained(i) for i in range(self.n_chains)]

    def pooled(self) -> np.ndarray:
        return np.concatenate(self.retained_chains(), axis=0)


def run_chain(
    density: GibbsDensity,
    init,
    config: SamplerConfig,
    chain_seed,
    initial_factor: Optional[np.ndarray] = None,
    chain_length: Optional[int] = None,
) -> ChainRun:
    """Run one adaptive chain of ``chain_length`` (default ``config.chain_length``) steps.

    ``initial_factor`` is a square root of the initial proposal covariance;
    by default ``config.initial_scale * I``. Proposals outside the feasible
    set have log-density ``-inf`` and are always rejected.
    """
    x = np.array(init, dtype=float)
    dim = density.model.dim
    if x.shape != (dim,):
        raise ValueError(f"init must have length {dim}")
    lq = density.log_q(x)
    if lq == -math.inf:
        raise FeasibilityError(f"initial iterate {x.tolist()} has zero density")
    n_steps = config.chain_length if chain_length is None else int(chain_length)
    if initial_factor is None:
        factor = config.initial_scale * np.eye(dim)
    else:
        factor = np.array(initial_factor, dtype=float)
    target = config.target_acceptance
    decay = config.decay

    rng = np.random.default_rng(chain_seed)
    normals = rng.standard_normal((n_steps, dim))
    log_u = np.log(rng.random(n_steps))

    samples = np.empty((n_steps, dim))
    trace = np.empty(n_steps)
    scales = np.empty(n_steps)
    sign, logdet = np.linalg.slogdet(factor)
    if sign == 0:
        raise ValueError("initial proposal factor is singular")
    log_scale = logdet / dim
    accepted = 0
    streak = 0
    log_q_fn = density.log_q

    for t in range(n_steps):
        u = normals[t]
        su = factor @ u
        proposal = x + su
        lq_prop = log_q_fn(proposal)
        log_ratio = lq_prop - lq
        if log_u[t] < log_ratio:
            x = proposal
            lq = lq_prop
            accepted += 1
            streak = 0
        else:
            streak += 1
            if streak >= STALL_LIMIT:
                raise StallError(
                    f"{STALL_LIMIT} consecutive rejections at step {t}; proposal scale {math.exp(log_scale):.3g}"
                )
        accept_prob = 1.0 if log_ratio >= 0.0 else math.exp(log_ratio)
        eta = min(1.0, dim * (t + 1) ** -decay)
        c = eta * (accept_prob - target)
        uu = float(u @ u)
        if uu > 0.0:
            root = math.sqrt(1.0 + c)
            factor = factor + ((root - 1.0) / uu) * np.outer(su, u)
            log_scale += math.log(root) / dim
        samples[t] = x
        trace[t] = lq
        scales[t] = log_scale

    return ChainRun(
        samples=samples,
        log_q=trace,
        acceptance_rate=accepted / n_steps,
        scale_trace=np.exp(scales),
        final_factor=factor,
    )


def chain_seed(base_seed: int, index: int) -> int:
    """Deterministic 64-bit seed for chain ``index`` of a run seeded with ``base_seed``."""
    ss = np.random.SeedSequence([int(base_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _box_scale(theta_star: np.ndarray) -> np.ndarray:
    mag = np.abs(theta_star)
    nonzero = mag[mag > 0]
    fill = float(np.mean(nonzero)) if nonzero.size else 1.0
    return np.where(mag > 0, mag, fill)


def overdispersed_inits(density: GibbsDensity, theta_star, width: float, n: int, seeds: Sequence[int],
                        max_tries: int = 1000) -> list:
    """One feasible start per chain, uniform in the box ``theta* (1 +/- width)``."""
    theta_star = np.asarray(theta_star, dtype=float)
    lo = np.minimum((1 - width) * theta_star, (1 + width) * theta_star)
    hi = np.maximum((1 - width) * theta_star, (1 + width) * theta_star)
    inits = []
    for i in range(n):
        rng = np.random.default_rng([seeds[i], 1])
        for _ in range(max_tries):
            cand = rng.uniform(lo, hi)
            if density.log_q(cand) > -math.inf:
                break
        else:
            raise SamplerError(f"chain {i}: no feasible overdispersed start after {max_tries} draws")
        inits.append(cand)
    return inits


def _run_indexed(args):
    index, density, init, config, seed, factor = args
    try:
        return run_chain(density, init, config, seed, initial_factor=factor)
    except Exception as exc:
        raise SamplerError(f"chain {index}: {exc}") from exc


def run_chain_set(density: GibbsDensity, calibration, config: SamplerConfig,
                  inits: Optional[Sequence] = None) -> ChainSet:
    """Run ``config.n_chains`` independent chains from overdispersed starts.

    ``calibration`` supplies ``theta_star`` and ``c``; the starting box has
    half-width ``overdispersion_factor * c`` relative to ``theta_star``.
    The initial proposal factor is diagonal with entries
    ``initial_scale * |theta*_k|`` (zeros replaced by the mean magnitude).
    """
    theta_star = np.asarray(calibration.theta_star, dtype=float)
    seeds = [chain_seed(config.seed, i) for i in range(config.n_chains)]
    if inits is None:
        width = config.overdispersion_factor * float(calibration.c)
        inits = overdispersed_inits(density, theta_star, width, config.n_chains, seeds)
    factor = np.diag(config.initial_scale * _box_scale(theta_star))
    jobs = [(i, density, inits[i], config, seeds[i], factor) for i in range(config.n_chains)]
    if config.threads > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.threads, config.n_chains)) as pool:
            runs = list(pool.map(_run_indexed, jobs))
    else:
        runs = [_run_indexed(job) for job in jobs]
    return ChainSet(
        chains=[r.samples for r in runs],
        log_q=[r.log_q for r in runs],
        acceptance_rate=np.array([r.acceptance_rate for r in runs]),
        burn_in=config.burn_in,
        seeds=seeds,
        param_names=list(density.model.param_names),
        scale_traces=[r.scale_trace for r in runs],
    )


# ---------------------------------------------------------------------------
# Convergence diagnostics


def psrf(traces) -> float:
    """Scalar Gelman-Rubin potential scale reduction factor.

    ``traces`` has shape ``(n_chains, n)``. With ``W`` the mean within-chain
    variance and ``B/n`` the variance of the chain means::

        R = sqrt(((n - 1) / n * W + B / n) / W)
    """
    traces = np.asarray(traces, dtype=float)
    if traces.ndim != 2 or traces.shape[0] < 2:
        raise ValueError("psrf needs at least two chains")
    m, n = traces.shape
    if n < 10:
        raise ValueError("psrf needs at least 10 samples per chain")
    within = float(np.mean(np.var(traces, axis=1, ddof=1)))
    if within == 0.0:
        raise DegenerateVarianceError("all within-chain variances are zero")
    between_over_n = float(np.var(np.mean(traces, axis=1), ddof=1))
    return math.sqrt(((n - 1) / n * within + between_over_n) / within)


@dataclass
class PsrfReport:
    theta_psrf: np.ndarray
    grad_psrf: np.ndarray
    threshold: float
    passed: bool
    available: bool = True
    note: str = ""

    @property
    def max_psrf(self) -> float:
        if not self.available:
            return math.nan
        return float(max(np.max(self.theta_psrf), np.max(self.grad_psrf)))

    def to_dict(self, names: Optional[Sequence[str]] = None) -> dict:
        out = {
            "available": self.available,
            "passed": self.passed,
            "threshold": self.threshold,
            "note": self.note,
        }
        if self.available:
            names = list(names) if names is not None else [f"theta_{k}" for k in range(len(self.theta_psrf))]
            out["theta"] = dict(zip(names, self.theta_psrf.tolist()))
            out["grad"] = dict(zip(names, self.grad_psrf.tolist()))
        return out


def _quantity_psrf(traces: np.ndarray) -> float:
    try:
        value = psrf(traces)
    except DegenerateVarianceError:
        return math.nan
    return value


def convergence_report(chains: ChainSet, gradients: Sequence[np.ndarray], threshold: float = 1.1) -> PsrfReport:
    """PSRF of every ``theta_k`` and every ``dL/dtheta_k`` over retained samples.

    ``gradients[i]`` must be aligned row-for-row with ``chains.retained(i)``.
    Degenerate (zero-variance) quantities get NaN and fail the check.
    """
    retained = chains.retained_chains()
    if len(gradients) != len(retained):
        raise AlignmentError(f"{len(gradients)} gradient blocks for {len(retained)} chains")
    for i, (s, g) in enumerate(zip(retained, gradients)):
        if np.shape(g) != s.shape:
            raise AlignmentError(f"chain {i}: gradients {np.shape(g)} vs samples {s.shape}")
    if chains.n_chains < 2:
        return PsrfReport(np.array([]), np.array([]), threshold, passed=False, available=False,
                          note="PSRF needs at least two chains")
    thetas = np.stack(retained)  # (m, n, dim)
    grads = np.stack([np.asarray(g, dtype=float) for g in gradients])
    dim = thetas.shape[2]
    theta_r = np.array([_quantity_psrf(thetas[:, :, k]) for k in range(dim)])
    grad_r = np.array([_quantity_psrf(grads[:, :, k]) for k in range(dim)])
    values = np.concatenate([theta_r, grad_r])
    passed = bool(np.all(np.isfinite(values)) and np.all(values < threshold))
    note = "" if np.all(np.isfinite(values)) else "degenerate or non-finite PSRF values"
    return PsrfReport(theta_r, grad_r, float(threshold), passed, True, note)


# ---------------------------------------------------------------------------
# Persistence


def write_chain_set(directory, chains: ChainSet) -> list:
    """Write ``chain_XXX.csv`` per chain, ``logq_traces.csv`` and ``chains_meta.json``."""
    directory = fileio.ensure_dir(directory)
    written = []
    for i, samples in enumerate(chains.chains):
        written.append(fileio.write_matrix_csv(directory / f"chain_{i:03d}.csv", chains.param_names, samples))
    header = [f"chain_{i:03d}" for i in range(chains.n_chains)]
    written.append(fileio.write_matrix_csv(directory / "logq_traces.csv", header, np.column_stack(chains.log_q)))
    meta = {
        "n_chains": chains.n_chains,
        "chain_length": chains.chain_length,
        "dim": chains.dim,
        "burn_in": chains.burn_in,
        "seeds": [int(s) for s in chains.seeds],
        "acceptance_rate": chains.acceptance_rate.tolist(),
        "param_names": chains.param_names,
        "files": [p.name for p in written],
    }
    written.append(fileio.write_json(directory / "chains_meta.json", meta))
    return written


def read_chain_set(directory) -> ChainSet:
    directory = Path(directory)
    meta_path = directory / "chains_meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no chains_meta.json in {directory}")
    meta = fileio.read_json(meta_path)
    chains = []
    for i in range(meta["n_chains"]):
        names, data = fileio.read_matrix_csv(directory / f"chain_{i:03d}.csv")
        if data.shape != (meta["chain_length"], meta["dim"]):
            raise AlignmentError(f"chain {i}: shape {data.shape} disagrees with chains_meta.json")
        chains.append(data)
    _, logq = fileio.read_matrix_csv(directory / "logq_traces.csv")
    return ChainSet(
        chains=chains,
        log_q=[logq[:, i] for i in range(meta["n_chains"])],
        acceptance_rate=np.array(meta["acceptance_rate"], dtype=float),
        burn_in=int(meta["burn_in"]),
        seeds=[int(s) for s in meta["seeds"]],
        param_names=list(meta["param_names"]),
    )

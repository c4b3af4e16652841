"""Calibration of the Gibbs density: reference point, loss threshold,
ridge weight and temperature.

The temperature is the root of ``Delta(delta) = alpha`` where ``Delta`` is
the probability, under the Gibbs density, that the regularized loss is at
most the threshold ``M_lambda``. ``Delta`` is increasing in ``delta`` and is
only available through MCMC estimates, so the root is bracketed and
bisected on ``log(delta)`` with chains that get longer as the estimate
approaches ``alpha``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import BracketError, CalibrationError, FeasibilityError, ModelEvaluationError, NonExistenceError
from .models import GibbsDensity, LossModel
from .sampler import SamplerConfig, _box_scale, run_chain

logger = logging.getLogger(__name__)

# smallest per-side bracket factor after moving to a longer chain
_MIN_REBRACKET = 1.05

__all__ = [
    "CalibrationConfig",
    "CalibrationResult",
    "OptimizationResult",
    "optimize_loss",
    "sample_uniform_box",
    "estimate_M",
    "compute_lambda",
    "estimate_Delta",
    "solve_temperature",
    "calibrate",
]


@dataclass
class CalibrationConfig:
    c: float
    nu: float = 0.0
    alpha: float = 0.99
    mc_samples_for_M: int = 5000
    delta_lo: float = 1e-6
    delta_hi: float = 10.0
    schedule: Sequence[int] = (1_000, 10_000, 100_000)
    tolerance: float = 0.005
    bracket_xtol: float = 1e-3
    expand_factor: float = 10.0
    expand_cap: float = 1e3
    max_iter: int = 60
    optimizer_budget: int = 500
    seed: int = 0
    delta_override: Optional[float] = None

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("c must be positive")
        if not 0.0 <= self.nu < 1.0:
            raise ValueError("nu must lie in [0, 1)")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.mc_samples_for_M < 100:
            raise ValueError("mc_samples_for_M must be >= 100")
        if not 0.0 < self.delta_lo < self.delta_hi:
            raise ValueError("need 0 < delta_lo < delta_hi")
        if not self.schedule or any(int(n) < 1000 for n in self.schedule):
            raise ValueError("every chain length in the schedule must be >= 1000")
        self.schedule = tuple(int(n) for n in self.schedule)
        if self.delta_override is not None and not self.delta_override > 0:
            raise ValueError("delta_override must be positive")


@dataclass
class CalibrationResult:
    theta_star: np.ndarray
    loss_at_star: float
    M: float
    M_stderr: float
    lam: float
    M_lambda: float
    delta: float
    delta_trace: list = field(default_factory=list)
    c: float = 0.0
    optimizer_warning: Optional[str] = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["theta_star"] = np.asarray(self.theta_star, dtype=float).tolist()
        out["delta_trace"] = [
            {"delta": float(d), "Delta_hat": float(p), "chain_length": int(n)} for d, p, n in self.delta_trace
        ]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationResult":
        return cls(
            theta_star=np.array(data["theta_star"], dtype=float),
            loss_at_star=float(data["loss_at_star"]),
            M=float(data["M"]),
            M_stderr=float(data["M_stderr"]),
            lam=float(data["lam"]),
            M_lambda=float(data["M_lambda"]),
            delta=float(data["delta"]),
            delta_trace=[(float(e["delta"]), float(e["Delta_hat"]), int(e["chain_length"]))
                         for e in data.get("delta_trace", [])],
            c=float(data.get("c", 0.0)),
            optimizer_warning=data.get("optimizer_warning"),
        )


# ---------------------------------------------------------------------------
# Reference point


class OptimizationResult(NamedTuple):
    theta_star: np.ndarray
    loss_at_star: float
    n_iter: int
    warning: Optional[str]


def _feasible_loss_grad(model: LossModel, theta):
    if not model.in_feasible_set(theta):
        return math.inf, None
    with np.errstate(all="ignore"):
        f, g = model.loss_and_grad(theta)
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        return math.inf, None
    return float(f), np.asarray(g, dtype=float)


def optimize_loss(model: LossModel, init, budget: int = 500, gtol: float = 1e-12) -> OptimizationResult:
    """BFGS with Armijo backtracking.

    Trial points that are infeasible or give a non-finite loss count as
    failed steps and are backtracked. If no descent is found the initial
    point is returned with a warning instead of raising.
    """
    x0 = np.array(init, dtype=float)
    f0, g0 = _feasible_loss_grad(model, x0)
    if g0 is None:
        raise FeasibilityError(f"{model.name}: optimizer start {x0.tolist()} is infeasible")
    if budget <= 0:
        warnings.warn("optimize_loss: iteration budget is zero; returning the initial point", RuntimeWarning,
                      stacklevel=2)
        return OptimizationResult(x0, f0, 0, "zero iteration budget")

    x, f, g = x0, f0, g0
    n = x.size
    H = np.eye(n)
    first = True
    warn = None
    it = 0
    while np.max(np.abs(g)) > gtol:
        if it == budget:
            warn = f"iteration budget {budget} exhausted"
            break
        it += 1
        p = -H @ g
        slope = float(g @ p)
        if slope >= 0:
            H, first = np.eye(n), True
            p = -g
            slope = -float(g @ g)
        step = 1.0
        for _ in range(60):
            x_new = x + step * p
            f_new, g_new = _feasible_loss_grad(model, x_new)
            if g_new is not None and f_new <= f + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            warn = f"line search failed at iteration {it}"
            break
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-300:
            if first:
                H = (sy / float(y @ y)) * np.eye(n)
                first = False
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)
        x, f, g = x_new, f_new, g_new

    if f >= f0 and np.max(np.abs(g0)) > gtol:
        warn = f"no descent found ({warn or 'stalled'})"
        warnings.warn(f"optimize_loss: {warn}; returning the initial point", RuntimeWarning, stacklevel=2)
        return OptimizationResult(x0, f0, it, warn)
    if warn:
        logger.info("optimize_loss: %s (loss %.3g)", warn, f)
    return OptimizationResult(x, float(f), it, warn)


# ---------------------------------------------------------------------------
# Threshold M and ridge weight


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_uniform_box(theta_star, c: float, count: int, seed=None) -> np.ndarray:
    """``count`` independent draws, coordinate k uniform between ``(1-c) theta*_k``
    and ``(1+c) theta*_k`` (endpoints ordered, so negative entries work)."""
    if c < 0:
        raise ValueError("c must be non-negative")
    theta_star = np.asarray(theta_star, dtype=float)
    a = (1.0 - c) * theta_star
    b = (1.0 + c) * theta_star
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    return _rng(seed).uniform(lo, hi, size=(int(count), theta_star.size))


def estimate_M(model: LossModel, theta_star, c: float, ell: int, seed=None,
               max_reject_rate: float = 0.5) -> tuple[float, float]:
    """Monte Carlo mean of the loss over the uniform box, and its standard error.

    Infeasible draws are replaced by fresh draws; if more than half of all
    draws are infeasible a :class:`CalibrationError` is raised.
    """
    if ell < 2:
        raise ValueError("need at least two Monte Carlo samples")
    rng = _rng(seed)
    kept = []
    n_kept = attempted = rejected = 0
    while n_kept < ell:
        draws = sample_uniform_box(theta_star, c, ell - n_kept, rng)
        ok = model.feasible_batch(draws)
        attempted += len(draws)
        rejected += int(np.count_nonzero(~ok))
        if attempted >= ell and rejected > max_reject_rate * attempted:
            raise CalibrationError(
                f"{rejected}/{attempted} uniform draws with c={c} are infeasible; use a smaller c"
            )
        kept.append(draws[ok])
        n_kept += int(np.count_nonzero(ok))
    samples = np.concatenate(kept)[:ell]
    with np.errstate(all="ignore"):
        losses = model.loss_batch(samples)
    if not np.all(np.isfinite(losses)):
        bad = samples[~np.isfinite(losses)][0]
        raise ModelEvaluationError(f"{model.name}: non-finite loss at theta={bad.tolist()}")
    return float(np.mean(losses)), float(np.std(losses, ddof=1) / math.sqrt(ell))


def compute_lambda(nu: float, M: float, theta_star) -> float:
    """Ridge weight so the penalty makes up a share ``nu`` of the regularized
    loss at the reference point: ``nu M / ((1 - nu) |theta*|^2)``."""
    if not 0.0 <= nu < 1.0:
        raise ValueError("nu must lie in [0, 1)")
    if nu == 0.0:
        return 0.0
    sq = float(np.dot(theta_star, theta_star))
    if sq == 0.0:
        raise CalibrationError("nu > 0 needs a nonzero reference point theta*")
    if not M > 0:
        raise CalibrationError(f"threshold M must be positive, got {M}")
    return nu * M / ((1.0 - nu) * sq)


# ---------------------------------------------------------------------------
# Temperature


def estimate_Delta(density: GibbsDensity, M_lambda: float, chain_length: int, seed, init,
                   sampler_config: Optional[SamplerConfig] = None,
                   initial_factor: Optional[np.ndarray] = None) -> float:
    """Fraction of retained chain samples with regularized loss <= ``M_lambda``.

    The regularized loss of every state is recovered from the stored
    log-density as ``-log_q / delta``.
    """
    if chain_length < 1000:
        raise ValueError("chain_length must be >= 1000")
    cfg = sampler_config or SamplerConfig(n_chains=1)
    run = run_chain(density, init, cfg, seed, initial_factor=initial_factor, chain_length=chain_length)
    burn = int(math.ceil(cfg.burn_in_fraction * chain_length))
    reg_loss = -run.log_q[burn:] / density.delta
    return float(np.mean(reg_loss <= M_lambda))


def solve_temperature(density_at: Callable[[float], GibbsDensity], M_lambda: float, alpha: float,
                      config: CalibrationConfig, init, sampler_config: Optional[SamplerConfig] = None,
                      initial_factor: Optional[np.ndarray] = None):
    """Root of ``Delta(delta) = alpha`` by bisection on ``log(delta)``.

    Chains start at ``config.schedule[0]`` steps. Once an estimate lands
    within ``config.tolerance`` of ``alpha``, or the bracket has collapsed,
    the next, longer chain length is used. The bracket is then rebuilt
    around the last midpoint (threefold log-width, at least a factor
    ``1.05`` each side) and its ends are re-checked, and pushed outward if
    needed, at the new length, since short chains may have placed the root
    on the wrong side. The solve stops once an estimate at the longest
    length is within tolerance, or the bracket is narrower than
    ``bracket_xtol`` (relative) at the longest length.

    Every estimate uses the same seed, so ``Delta_hat`` is a deterministic
    function of ``(delta, seed, chain_length)``.

    Returns ``(delta, trace)`` with trace entries ``(delta, Delta_hat, chain_length)``.
    """
    schedule = list(config.schedule)
    trace = []

    def evaluate(delta, length):
        value = estimate_Delta(density_at(delta), M_lambda, length, config.seed, init,
                               sampler_config, initial_factor)
        trace.append((float(delta), value, int(length)))
        logger.info("Delta_hat(%.6g) = %.5f  [chain length %d]", delta, value, length)
        return value

    lo, hi = float(config.delta_lo), float(config.delta_hi)
    if evaluate(lo, schedule[0]) >= alpha:
        raise NonExistenceError(
            f"Delta_hat({lo:g}) = {trace[-1][1]:.4f} >= alpha = {alpha}; no root above the lower bracket end "
            f"(alpha must exceed Delta at the lower end)"
        )
    while evaluate(hi, schedule[0]) < alpha:
        lo = hi
        hi *= config.expand_factor
        if hi > config.expand_cap:
            raise BracketError(
                f"Delta_hat stays below alpha={alpha} up to delta={lo:g}; expansion cap {config.expand_cap:g} reached"
            )
    floor = float(config.delta_lo)

    def rebracket(center, width, length):
        lo, hi = max(floor, center / width), center * width
        while evaluate(lo, length) >= alpha:
            if lo == floor:
                raise NonExistenceError(
                    f"Delta_hat({floor:g}) >= alpha = {alpha} at chain length {length}; no root above the lower end"
                )
            lo, hi = max(floor, lo / width), lo
        while evaluate(hi, length) < alpha:
            lo, hi = hi, hi * width
            if hi > config.expand_cap:
                raise BracketError(f"Delta_hat stays below alpha={alpha} up to delta={lo:g} at chain length {length}")
        return lo, hi

    stage = 0
    last = len(schedule) - 1
    for _ in range(config.max_iter):
        mid = math.sqrt(lo * hi)
        value = evaluate(mid, schedule[stage])
        close = abs(value - alpha) <= config.tolerance
        if close and stage == last:
            return mid, trace
        if value < alpha:
            lo = mid
        else:
            hi = mid
        narrow = hi / lo < 1.0 + config.bracket_xtol
        if narrow and stage == last:
            warnings.warn(
                f"temperature bracket collapsed at delta={mid:.6g} with |Delta_hat - alpha| = "
                f"{abs(value - alpha):.4g} > tolerance",
                RuntimeWarning,
                stacklevel=2,
            )
            return math.sqrt(lo * hi), trace
        if (close or narrow) and stage < last:
            stage += 1
            lo, hi = rebracket(mid, max((hi / lo) ** 1.5, _MIN_REBRACKET), schedule[stage])
    raise CalibrationError(f"temperature solve did not converge in {config.max_iter} iterations")


def calibrate(model: LossModel, config: CalibrationConfig, sampler_config: Optional[SamplerConfig] = None,
              init=None, theta_star=None) -> CalibrationResult:
    """Reference point, threshold, ridge weight and temperature in sequence."""
    warn = None
    if theta_star is None:
        start = model.default_init() if init is None else np.asarray(init, dtype=float)
        opt = optimize_loss(model, start, config.optimizer_budget)
        theta_star, loss_star, warn = opt.theta_star, opt.loss_at_star, opt.warning
    else:
        theta_star = np.asarray(theta_star, dtype=float)
        loss_star = model.loss(theta_star)
    M, M_se = estimate_M(model, theta_star, config.c, config.mc_samples_for_M,
                         np.random.default_rng([config.seed, 7]))
    lam = compute_lambda(config.nu, M, theta_star)
    M_lambda = M + lam * float(np.dot(theta_star, theta_star))
    if config.delta_override is not None:
        delta, trace = float(config.delta_override), []
    else:
        sampler_config = sampler_config or SamplerConfig(n_chains=1)
        factor = np.diag(sampler_config.initial_scale * _box_scale(theta_star))
        delta, trace = solve_temperature(lambda d: GibbsDensity(model, d, lam), M_lambda, config.alpha,
                                         config, theta_star, sampler_config, factor)
    return CalibrationResult(
        theta_star=theta_star,
        loss_at_star=float(loss_star),
        M=M,
        M_stderr=M_se,
        lam=lam,
        M_lambda=M_lambda,
        delta=delta,
        delta_trace=trace,
        c=float(config.c),
        optimizer_warning=warn,
    )

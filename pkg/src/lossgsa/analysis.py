"""Post-processing of retained MCMC samples.

Sensitivity index of parameter k::

    S_k = E|theta_k| * E|dL/dtheta_k|

Derivative of S_k with respect to the temperature, from the same samples::

    F'_k = -Cov(|theta_k|, L_lam) E|dL/dtheta_k| - E|theta_k| Cov(|dL/dtheta_k|, L_lam)

where ``L_lam = L + lam |theta|^2``. Covariances use the unbiased
``(count - 1)`` denominator throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import AlignmentError, DegenerateVarianceError, GSAError, ModelEvaluationError, PerturbationRangeError
from .models import LossModel
from .sampler import ChainSet, PsrfReport, convergence_report

__all__ = [
    "GradientEvaluation",
    "SensitivityReport",
    "PerturbationCurves",
    "AnalysisResult",
    "evaluate_gradients",
    "sensitivity_indices",
    "sensitivity_stderr",
    "robustness_derivative",
    "perturbation_curves",
    "correlation_matrix",
    "batch_means_stderr",
    "analyze",
]


@dataclass
class GradientEvaluation:
    """Per-chain arrays aligned row-for-row with ``ChainSet.retained(i)``."""

    grads: list
    losses: list
    reg_losses: list

    def pooled(self):
        return (np.concatenate(self.grads), np.concatenate(self.losses), np.concatenate(self.reg_losses))


def evaluate_gradients(model: LossModel, chains: ChainSet, lam: float = 0.0, chunk: int = 4096) -> GradientEvaluation:
    grads, losses, reg = [], [], []
    for i, samples in enumerate(chains.retained_chains()):
        if samples.shape[0] == 0:
            raise GSAError(f"chain {i} has no retained samples")
        if samples.shape[1] != model.dim:
            raise AlignmentError(f"chain {i}: samples have {samples.shape[1]} columns, model has dim {model.dim}")
        L = np.empty(len(samples))
        G = np.empty_like(samples)
        for start in range(0, len(samples), chunk):
            block = samples[start:start + chunk]
            L[start:start + chunk], G[start:start + chunk] = model.loss_and_grad_batch(block)
        if not (np.all(np.isfinite(L)) and np.all(np.isfinite(G))):
            bad = int(np.flatnonzero(~(np.isfinite(L) & np.all(np.isfinite(G), axis=1)))[0])
            raise ModelEvaluationError(f"chain {i}: non-finite loss or gradient at retained row {bad}")
        grads.append(G)
        losses.append(L)
        reg.append(L + lam * np.einsum("ij,ij->i", samples, samples) if lam else L.copy())
    return GradientEvaluation(grads, losses, reg)


def _check_rows(samples, gradients):
    samples = np.asarray(samples, dtype=float)
    gradients = np.asarray(gradients, dtype=float)
    if samples.shape != gradients.shape:
        raise AlignmentError(f"samples {samples.shape} and gradients {gradients.shape} differ")
    if samples.shape[0] == 0:
        raise GSAError("no samples")
    return samples, gradients


def sensitivity_indices(samples, gradients):
    """Return ``(S, mean_abs_theta, mean_abs_grad)``; ``S`` is the exact product."""
    samples, gradients = _check_rows(samples, gradients)
    mean_abs_theta = np.mean(np.abs(samples), axis=0)
    mean_abs_grad = np.mean(np.abs(gradients), axis=0)
    return mean_abs_theta * mean_abs_grad, mean_abs_theta, mean_abs_grad


def sensitivity_stderr(samples, gradients) -> np.ndarray:
    """Delta-method standard error of ``S`` treating rows as independent.

    MCMC autocorrelation is ignored, so this understates the true error;
    :func:`batch_means_stderr` accounts for it.
    """
    samples, gradients = _check_rows(samples, gradients)
    a = np.abs(samples)
    b = np.abs(gradients)
    n = a.shape[0]
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    va, vb = a.var(axis=0, ddof=1), b.var(axis=0, ddof=1)
    cab = np.sum((a - ma) * (b - mb), axis=0) / (n - 1)
    var = (mb * mb * va + ma * ma * vb + 2.0 * ma * mb * cab) / n
    return np.sqrt(np.maximum(var, 0.0))


def robustness_derivative(samples, gradients, reg_losses) -> np.ndarray:
    """Derivative of each sensitivity index with respect to the temperature."""
    samples, gradients = _check_rows(samples, gradients)
    reg_losses = np.asarray(reg_losses, dtype=float)
    if reg_losses.shape != (samples.shape[0],):
        raise AlignmentError("regularized losses must have one entry per sample row")
    if samples.shape[0] < 2:
        raise GSAError("need at least two samples")
    a = np.abs(samples)
    b = np.abs(gradients)
    centered = reg_losses - reg_losses.mean()
    n = samples.shape[0]
    cov_a = (a - a.mean(axis=0)).T @ centered / (n - 1)
    cov_b = (b - b.mean(axis=0)).T @ centered / (n - 1)
    return -cov_a * b.mean(axis=0) - a.mean(axis=0) * cov_b


@dataclass
class PerturbationCurves:
    h_grid: np.ndarray
    curves: np.ndarray  # (n_params, len(h_grid))
    h_max: float

    @property
    def variation(self) -> np.ndarray:
        return self.curves.max(axis=1) - self.curves.min(axis=1)


def perturbation_curves(S, F_prime, delta: float, h_max: float = 0.1, n_grid: int = 41) -> PerturbationCurves:
    """Normalized first-order indices at temperature ``delta (1 + h)``::

        (S_k + h delta F'_k) / sum_j (S_j + h delta F'_j)

    on ``n_grid`` (odd) uniform points strictly inside ``(-h_max, h_max)``,
    the middle point being ``h = 0``.
    """
    S = np.asarray(S, dtype=float)
    F_prime = np.asarray(F_prime, dtype=float)
    if n_grid < 1 or n_grid % 2 == 0:
        raise ValueError("n_grid must be a positive odd number")
    if not h_max > 0:
        raise ValueError("h_max must be positive")
    h = np.linspace(-h_max, h_max, n_grid + 2)[1:-1]
    h[n_grid // 2] = 0.0
    num = S[:, None] + h[None, :] * delta * F_prime[:, None]
    den = num.sum(axis=0)
    if np.any(den <= 0):
        bad = float(h[np.argmax(den <= 0)])
        raise PerturbationRangeError(f"normalizer is not positive at h={bad:g}; use a smaller h_max")
    return PerturbationCurves(h, num / den, float(h_max))


def correlation_matrix(samples) -> np.ndarray:
    """Pearson correlation matrix of the columns of ``samples``."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise GSAError("need a 2-D sample matrix with at least two rows")
    sd = samples.std(axis=0)
    if np.any(sd == 0):
        raise DegenerateVarianceError(f"zero-variance coordinates: {np.flatnonzero(sd == 0).tolist()}")
    corr = np.corrcoef(samples, rowvar=False)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


def batch_means_stderr(statistic: Callable[..., np.ndarray], per_chain: Sequence[Sequence[np.ndarray]],
                       n_batches: int = 20) -> np.ndarray:
    """Standard error of a pooled statistic from non-overlapping batches.

    ``per_chain[i]`` is a tuple of row-aligned arrays for chain i. Each chain
    is cut into ``n_batches`` contiguous blocks, ``statistic`` is evaluated on
    every block and the spread of those values gives the error of the
    full-sample statistic. Long enough batches make this robust to
    within-chain autocorrelation.
    """
    values = []
    for arrays in per_chain:
        n = len(arrays[0])
        edges = np.linspace(0, n, n_batches + 1).astype(int)
        for lo, hi in zip(edges[:-1], edges[1:]):
            values.append(statistic(*(a[lo:hi] for a in arrays)))
    values = np.asarray(values, dtype=float)
    return values.std(axis=0, ddof=1) / math.sqrt(len(values))


@dataclass
class SensitivityReport:
    S: np.ndarray
    mean_abs_theta: np.ndarray
    mean_abs_grad: np.ndarray
    F_prime: np.ndarray
    per_chain_S: np.ndarray
    S_stderr: np.ndarray
    delta: float
    lam: float
    param_names: list = field(default_factory=list)

    @property
    def S_normalized(self) -> np.ndarray:
        return self.S / self.S.sum()

    def to_dict(self) -> dict:
        return {
            "param_names": list(self.param_names),
            "S": self.S.tolist(),
            "S_normalized": self.S_normalized.tolist(),
            "S_stderr_iid": self.S_stderr.tolist(),
            "mean_abs_theta": self.mean_abs_theta.tolist(),
            "mean_abs_grad": self.mean_abs_grad.tolist(),
            "F_prime": self.F_prime.tolist(),
            "per_chain_S": self.per_chain_S.tolist(),
            "delta": self.delta,
            "lambda": self.lam,
        }


@dataclass
class AnalysisResult:
    report: SensitivityReport
    curves: PerturbationCurves
    correlations: np.ndarray
    psrf: PsrfReport
    gradients: GradientEvaluation


def analyze(model: LossModel, chains: ChainSet, delta: float, lam: float, h_max: float = 0.1,
            psrf_threshold: float = 1.1, n_grid: int = 41) -> AnalysisResult:
    """Gradients at retained samples, then indices, robustness curves,
    correlations and PSRF diagnostics."""
    ge = evaluate_gradients(model, chains, lam)
    samples = chains.pooled()
    grads, _, reg = ge.pooled()
    S, mt, mg = sensitivity_indices(samples, grads)
    per_chain = np.array([sensitivity_indices(s, g)[0] for s, g in zip(chains.retained_chains(), ge.grads)])
    report = SensitivityReport(
        S=S,
        mean_abs_theta=mt,
        mean_abs_grad=mg,
        F_prime=robustness_derivative(samples, grads, reg),
        per_chain_S=per_chain,
        S_stderr=sensitivity_stderr(samples, grads),
        delta=float(delta),
        lam=float(lam),
        param_names=list(chains.param_names or model.param_names),
    )
    curves = perturbation_curves(report.S, report.F_prime, delta, h_max, n_grid)
    corr = correlation_matrix(samples)
    diag = convergence_report(chains, ge.grads, psrf_threshold)
    return AnalysisResult(report, curves, corr, diag, ge)

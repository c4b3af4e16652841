"""Loss models, the Gibbs density built on them, and gradient checks.

A loss model exposes the loss, its gradient and a feasibility test. The
Gibbs density over a model at temperature ``delta`` with ridge weight
``lam`` has unnormalized log-density ``-delta * (loss + lam * |theta|^2)``
on the feasible set and ``-inf`` elsewhere.
"""

from __future__ import annotations

import importlib
import math
from dataclasses import dataclass
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, FeasibilityError, ModelEvaluationError

__all__ = [
    "LossModel",
    "GibbsDensity",
    "SyntheticSpaceTimeModel",
    "QuadraticOracleModel",
    "log_q",
    "eval_loss_and_grad",
    "check_gradient",
    "synthetic_predict",
    "load_model",
    "BUILTIN_MODELS",
]


class LossModel:
    """Base class for loss models.

    Subclasses set ``dim`` and ``name`` and implement :meth:`loss` and
    :meth:`grad`. Everything else has a working default. Implementations
    must be deterministic; the built-ins are immutable after construction
    and therefore safe to share between workers.

    Override :meth:`in_feasible_set` to restrict the support. Override the
    ``*_batch`` methods when a vectorized evaluation is cheaper than a
    Python loop over rows.
    """

    dim: int = 0
    name: str = "loss-model"

    @property
    def param_names(self) -> list[str]:
        return [f"theta_{k}" for k in range(self.dim)]

    def loss(self, theta: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def loss_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        return self.loss(theta), self.grad(theta)

    def in_feasible_set(self, theta: np.ndarray) -> bool:
        return bool(np.all(np.isfinite(theta)))

    def loss_batch(self, thetas: np.ndarray) -> np.ndarray:
        return np.array([self.loss(row) for row in thetas], dtype=float)

    def loss_and_grad_batch(self, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        thetas = np.atleast_2d(thetas)
        losses = np.empty(len(thetas))
        grads = np.empty_like(thetas, dtype=float)
        for i, row in enumerate(thetas):
            losses[i], grads[i] = self.loss_and_grad(row)
        return losses, grads

    def feasible_batch(self, thetas: np.ndarray) -> np.ndarray:
        if type(self).in_feasible_set is LossModel.in_feasible_set:
            return np.all(np.isfinite(thetas), axis=1)
        return np.array([self.in_feasible_set(row) for row in thetas], dtype=bool)

    def default_init(self) -> np.ndarray:
        return np.ones(self.dim)

    def predict_outputs(self, theta: np.ndarray):
        """Model outputs for visual inspection, or ``None`` if the model has none.

        When implemented, returns ``(columns, table)`` where ``table`` is a
        2-D array whose columns are named by ``columns``.
        """
        return None

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim})"


@dataclass(frozen=True)
class GibbsDensity:
    """Unnormalized Gibbs density ``exp(-delta * (L + lam * |theta|^2))`` on B."""

    model: LossModel
    delta: float
    lam: float = 0.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"temperature must be positive, got {self.delta}")
        if not self.lam >= 0:
            raise ValueError(f"regularization factor must be >= 0, got {self.lam}")

    def regularized_loss(self, theta: np.ndarray) -> float:
        return self.model.loss(theta) + self.lam * float(np.dot(theta, theta))

    def log_q(self, theta: np.ndarray) -> float:
        return log_q(self, theta)

    def with_delta(self, delta: float) -> "GibbsDensity":
        return GibbsDensity(self.model, float(delta), self.lam)


def log_q(density: GibbsDensity, theta) -> float:
    """Unnormalized log-density; ``-inf`` outside the feasible set.

    A loss of ``+inf`` (overflow far out in the tails) maps to ``-inf`` as
    well. NaN or ``-inf`` losses on feasible points raise
    :class:`ModelEvaluationError`.
    """
    theta = np.asarray(theta, dtype=float)
    model = density.model
    if theta.shape != (model.dim,):
        raise ValueError(f"expected a vector of length {model.dim}, got shape {theta.shape}")
    if not model.in_feasible_set(theta):
        return -math.inf
    with np.errstate(over="ignore", invalid="ignore"):
        value = model.loss(theta)
    if value == math.inf:
        return -math.inf
    if not math.isfinite(value):
        raise ModelEvaluationError(f"{model.name}: loss is {value} at theta={theta.tolist()}")
    return -density.delta * (value + density.lam * float(np.dot(theta, theta)))


def eval_loss_and_grad(model: LossModel, theta) -> tuple[float, np.ndarray]:
    theta = np.asarray(theta, dtype=float)
    if not model.in_feasible_set(theta):
        raise FeasibilityError(f"{model.name}: theta={theta.tolist()} is outside the feasible set")
    value, g = model.loss_and_grad(theta)
    return float(value), np.asarray(g, dtype=float)


def check_gradient(model: LossModel, theta, step: float = 1e-6) -> float:
    """Max relative error between the analytic gradient and central differences.

    The relative error of component k is ``|g_k - fd_k| / max(|g_k|, |fd_k|, 1e-12)``.
    """
    theta = np.asarray(theta, dtype=float)
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = np.asarray(model.grad(theta), dtype=float)
    fd = np.empty(model.dim)
    for k in range(model.dim):
        e = np.zeros(model.dim)
        e[k] = step
        fd[k] = (model.loss(theta + e) - model.loss(theta - e)) / (2.0 * step)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-12)
    return float(np.max(np.abs(analytic - fd) / scale))


# ---------------------------------------------------------------------------
# Synthetic space-time model

SYNTHETIC_PARAM_NAMES = ["beta0", "beta1", "beta2", "beta3", "gamma", "alpha0", "alpha1", "alpha2"]
SYNTHETIC_THETA_TRUE = np.array([2.0, 10.0, 3.0, 0.01, 0.01, 1.0, 0.01, 1.0])
_OMEGA = 2.0 * math.pi / 100.0


def _temporal_basis(t: np.ndarray):
    cos = np.cos(_OMEGA * t)
    sin = np.sin(_OMEGA * t)
    logistic = 1.0 / (1.0 + np.exp(-0.1 * (t - 50.0)))
    return cos, sin, logistic


def synthetic_predict(theta, x: float, t: float) -> float:
    """Evaluate ``S(x) * T(t)`` for a parameter vector in the fixed ordering
    ``(beta0, beta1, beta2, beta3, gamma, alpha0, alpha1, alpha2)``."""
    b0, b1, b2, b3, gamma, a0, a1, a2 = (float(v) for v in theta)
    spatial = a0 + a1 * x + a2 * x * x
    temporal = (
        b0
        + b1 * math.exp(-gamma * t) * math.cos(_OMEGA * t)
        + b2 * math.sin(_OMEGA * t)
        + b3 / (1.0 + math.exp(-0.1 * (t - 50.0)))
    )
    return spatial * temporal


class SyntheticSpaceTimeModel(LossModel):
    """Least-squares fit of ``S(x) T(t)`` to noise-free data on a 15x15 grid.

    ``S`` is quadratic in space, ``T`` is an intercept plus a damped cosine,
    a sine and a logistic ramp in time. The feasible set is all of R^8.
    """

    name = "synthetic"
    dim = 8

    def __init__(self, n_x: int = 15, n_t: int = 15, theta_true: Optional[Sequence[float]] = None):
        self.theta_true = np.array(SYNTHETIC_THETA_TRUE if theta_true is None else theta_true, dtype=float)
        if self.theta_true.shape != (8,):
            raise ValueError("theta_true must have 8 entries")
        xs = np.linspace(0.0, 1.0, n_x)
        ts = np.linspace(0.0, 100.0, n_t)
        xx, tt = np.meshgrid(xs, ts, indexing="ij")
        self.x = xx.ravel()
        self.t = tt.ravel()
        self._cos, self._sin, self._logistic = _temporal_basis(self.t)
        self.data = self._predict_grid(self.theta_true[None, :])[0]
        for arr in (self.x, self.t, self._cos, self._sin, self._logistic, self.data):
            arr.setflags(write=False)

    @property
    def param_names(self) -> list[str]:
        return list(SYNTHETIC_PARAM_NAMES)

    @property
    def n_points(self) -> int:
        return self.x.size

    def _parts(self, thetas: np.ndarray):
        b0, b1, b2, b3, gamma, a0, a1, a2 = (thetas[:, [k]] for k in range(8))
        x, t = self.x[None, :], self.t[None, :]
        with np.errstate(over="ignore"):
            decay = np.exp(-gamma * t)
        damped = decay * self._cos
        spatial = a0 + a1 * x + a2 * x * x
        temporal = b0 + b1 * damped + b2 * self._sin + b3 * self._logistic
        return spatial, temporal, damped

    def _predict_grid(self, thetas: np.ndarray) -> np.ndarray:
        spatial, temporal, _ = self._parts(thetas)
        return spatial * temporal

    def loss_batch(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        with np.errstate(over="ignore", invalid="ignore"):
            resid = self._predict_grid(thetas) - self.data
            return np.mean(resid * resid, axis=1)

    def loss_and_grad_batch(self, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        with np.errstate(over="ignore", invalid="ignore"):
            spatial, temporal, damped = self._parts(thetas)
            resid = spatial * temporal - self.data
            losses = np.mean(resid * resid, axis=1)
            w = (2.0 / self.n_points) * resid
            ws = w * spatial
            wt = w * temporal
            b1 = thetas[:, [1]]
            grads = np.column_stack(
                [
                    ws.sum(axis=1),
                    (ws * damped).sum(axis=1),
                    (ws @ self._sin),
                    (ws @ self._logistic),
                    -(ws * b1 * self.t * damped).sum(axis=1),
                    wt.sum(axis=1),
                    wt @ self.x,
                    wt @ (self.x * self.x),
                ]
            )
        return losses, grads

    def loss(self, theta: np.ndarray) -> float:
        # single-vector path; the sampler calls this once per step
        b0, b1, b2, b3, gamma, a0, a1, a2 = theta.tolist()
        x = self.x
        with np.errstate(over="ignore", invalid="ignore"):
            damped = np.exp(-gamma * self.t)
            damped *= self._cos
            temporal = b1 * damped
            temporal += b0
            temporal += b2 * self._sin
            temporal += b3 * self._logistic
            resid = (a0 + (a1 + a2 * x) * x) * temporal
            resid -= self.data
            return float(resid @ resid) / self.n_points

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.loss_and_grad_batch(theta)[1][0]

    def loss_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        losses, grads = self.loss_and_grad_batch(theta)
        return float(losses[0]), grads[0]

    def default_init(self) -> np.ndarray:
        return 1.2 * self.theta_true

    def predict_outputs(self, theta: np.ndarray):
        pred = self._predict_grid(np.asarray(theta, dtype=float)[None, :])[0]
        return ["x", "t", "prediction"], np.column_stack([self.x, self.t, pred])


# ---------------------------------------------------------------------------
# Diagonal quadratic oracle


class QuadraticOracleModel(LossModel):
    """``L(theta) = 0.5 * sum_k A_kk theta_k^2`` on all of R^n.

    With no ridge term the Gibbs density is Gaussian with independent
    coordinates of variance ``1 / (delta * A_kk)``, which makes every
    downstream quantity available in closed form.
    """

    name = "quadratic"

    def __init__(self, diag: Sequence[float] = (1.0,)):
        diag = np.array(diag, dtype=float).ravel()
        if diag.size == 0 or np.any(diag <= 0) or not np.all(np.isfinite(diag)):
            raise ValueError("diagonal entries must be positive and finite")
        diag.setflags(write=False)
        self.diag = diag
        self.dim = diag.size

    def loss(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        return 0.5 * float(np.dot(self.diag * theta, theta))

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.diag * np.asarray(theta, dtype=float)

    def loss_batch(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        return 0.5 * np.sum(self.diag * thetas * thetas, axis=1)

    def loss_and_grad_batch(self, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        g = self.diag * thetas
        return 0.5 * np.sum(g * thetas, axis=1), g


BUILTIN_MODELS = {
    "synthetic": SyntheticSpaceTimeModel,
    "quadratic": QuadraticOracleModel,
}


def load_model(spec: Mapping[str, Any] | str) -> LossModel:
    """Build a model from ``{"name": ..., "params": {...}}``.

    ``name`` is either a built-in key or ``"package.module:ClassName"`` for
    a third-party :class:`LossModel` subclass; ``params`` are passed to the
    constructor as keyword arguments.
    """
    if isinstance(spec, str):
        spec = {"name": spec}
    name = spec.get("name")
    params = dict(spec.get("params") or {})
    if not name:
        raise ConfigError("model spec needs a 'name'")
    if name in BUILTIN_MODELS:
        cls = BUILTIN_MODELS[name]
    elif ":" in name:
        module_name, _, attr = name.partition(":")
        try:
            cls = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot load model plugin {name!r}: {exc}") from exc
    else:
        raise ConfigError(f"unknown model {name!r}; built-ins are {sorted(BUILTIN_MODELS)}")
    try:
        model = cls(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for model {name!r}: {exc}") from exc
    if not isinstance(model, LossModel):
        raise ConfigError(f"{name!r} did not produce a LossModel")
    return model

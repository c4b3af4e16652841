import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lossgsa.calibrate import (
    CalibrationConfig,
    CalibrationResult,
    calibrate,
    compute_lambda,
    estimate_Delta,
    estimate_M,
    optimize_loss,
    sample_uniform_box,
    solve_temperature,
)
from lossgsa.errors import BracketError, CalibrationError, NonExistenceError
from lossgsa.models import GibbsDensity, LossModel, QuadraticOracleModel, SyntheticSpaceTimeModel
from lossgsa.sampler import SamplerConfig

import oracles

THETA_TRUE = np.array(oracles.THETA_TRUE)


class ConstantLoss(LossModel):
    name = "constant"
    dim = 2

    def loss(self, theta):
        return 7.0

    def grad(self, theta):
        return np.zeros(2)


class HalfPlane(QuadraticOracleModel):
    def in_feasible_set(self, theta):
        return bool(theta[0] > 100)


# -- optimizer -------------------------------------------------------------


def test_optimize_quadratic():
    res = optimize_loss(QuadraticOracleModel((1.0, 3.0)), np.array([3.0, -2.0]))
    np.testing.assert_allclose(res.theta_star, 0.0, atol=1e-6)
    assert res.loss_at_star < 1e-12 and res.warning is None


def test_optimize_synthetic_from_nearby_start():
    m = SyntheticSpaceTimeModel()
    init = 1.2 * THETA_TRUE
    res = optimize_loss(m, init)
    assert res.loss_at_star < 1e-8
    assert res.loss_at_star <= m.loss(init)


def test_optimize_zero_budget():
    m = QuadraticOracleModel((1.0,))
    res = optimize_loss(m, np.array([2.0]), budget=0)
    assert res.theta_star.tolist() == [2.0]
    assert res.loss_at_star == 2.0
    assert res.warning


# -- uniform box -----------------------------------------------------------


def test_box_zero_coordinate():
    draws = sample_uniform_box(np.array([1.0, 0.0, -2.0]), 0.3, 1000, 1)
    assert np.all(draws[:, 1] == 0.0)
    assert np.all((draws[:, 2] >= -2.6) & (draws[:, 2] <= -1.4))


def test_box_support():
    draws = sample_uniform_box(THETA_TRUE, 0.1, 5000, 2)
    assert np.all(draws >= 0.9 * THETA_TRUE) and np.all(draws <= 1.1 * THETA_TRUE)


def test_box_mean():
    c = 0.1
    draws = sample_uniform_box(THETA_TRUE, c, 100_000, 3)
    se = 2 * c * np.abs(THETA_TRUE) / math.sqrt(12) / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - THETA_TRUE) < 4 * se)


# -- threshold M -----------------------------------------------------------


def test_M_constant_loss():
    assert estimate_M(ConstantLoss(), np.ones(2), 0.1, 500, 0) == (7.0, 0.0)


def test_M_point_mass():
    m = SyntheticSpaceTimeModel()
    theta = 1.05 * THETA_TRUE
    M, se = estimate_M(m, theta, 0.0, 100, 0)
    assert M == pytest.approx(m.loss(theta), rel=1e-12) and se == pytest.approx(0.0, abs=1e-15)


def test_M_against_oversampled_oracle():
    M, se = estimate_M(SyntheticSpaceTimeModel(), THETA_TRUE, 0.1, 5000, 11)
    rng = np.random.default_rng(99)
    lo, hi = 0.9 * THETA_TRUE, 1.1 * THETA_TRUE
    values = np.concatenate([oracles.vector_loss(rng.uniform(lo, hi, size=(50_000, 8))) for _ in range(20)])
    ref, ref_se = values.mean(), values.std(ddof=1) / math.sqrt(values.size)
    assert abs(M - ref) < 4 * math.hypot(se, ref_se)


def test_M_stderr_scales_with_sqrt_ell():
    m = SyntheticSpaceTimeModel()
    _, se1 = estimate_M(m, THETA_TRUE, 0.1, 5000, 1)
    _, se4 = estimate_M(m, THETA_TRUE, 0.1, 20000, 2)
    assert se4 / se1 == pytest.approx(0.5, rel=0.2)


def test_M_persistent_infeasibility():
    with pytest.raises(CalibrationError, match="smaller c"):
        estimate_M(HalfPlane((1.0,)), np.array([1.0]), 0.1, 200, 0)


# -- lambda ----------------------------------------------------------------


def test_lambda_examples():
    assert compute_lambda(0.0, 10.0, np.array([1.0, 1.0])) == 0.0
    assert compute_lambda(0.5, 10.0, np.array([2.0, 0.0])) == 2.5


def test_lambda_synthetic():
    M, _ = estimate_M(SyntheticSpaceTimeModel(), THETA_TRUE, 0.1, 5000, 0)
    assert compute_lambda(0.2, M, THETA_TRUE) == pytest.approx(0.2 * M / (0.8 * 115.0003), rel=1e-9)


def test_lambda_zero_reference_point():
    with pytest.raises(CalibrationError):
        compute_lambda(0.2, 1.0, np.zeros(3))


@given(nu=st.floats(0.01, 0.95), M=st.floats(1e-3, 1e3), s=st.floats(1e-2, 1e2))
def test_lambda_homogeneous(nu, M, s):
    theta = np.array([1.0, -2.0, 0.5])
    assert compute_lambda(nu, s * M, math.sqrt(s) * theta) == pytest.approx(compute_lambda(nu, M, theta), rel=1e-9)


# -- Delta -----------------------------------------------------------------

Q1 = QuadraticOracleModel((1.0,))
ONE_CHAIN = SamplerConfig(n_chains=1, chain_length=1000, target_acceptance=0.44, burn_in_fraction=0.1)


def test_Delta_everything_good():
    assert estimate_Delta(GibbsDensity(Q1, 1.0), 1e300, 2000, 0, np.zeros(1), ONE_CHAIN) == 1.0


def test_Delta_nothing_good():
    assert estimate_Delta(GibbsDensity(Q1, 1.0), -1.0, 2000, 0, np.zeros(1), ONE_CHAIN) == 0.0


def test_Delta_at_closed_form_root():
    n = 200_000
    value = estimate_Delta(GibbsDensity(Q1, 3.3175), 1.0, n, 4, np.zeros(1), ONE_CHAIN)
    retained = n - math.ceil(0.1 * n)
    # binomial error inflated for autocorrelation
    se = math.sqrt(0.99 * 0.01 / retained) * 3
    assert abs(value - oracles.quadratic_Delta(3.3175, 1.0)) < 3 * se


def test_Delta_deterministic():
    d = GibbsDensity(Q1, 2.0)
    a = estimate_Delta(d, 1.0, 3000, 9, np.zeros(1), ONE_CHAIN)
    assert a == estimate_Delta(d, 1.0, 3000, 9, np.zeros(1), ONE_CHAIN)
    assert 0.0 <= a <= 1.0


def test_closed_form_Delta_monotone():
    grid = np.geomspace(0.01, 20, 50)
    vals = [oracles.quadratic_Delta(d, 1.0, n=4) for d in grid]
    assert np.all(np.diff(vals) > 0)


def test_Delta_derivative_identity():
    # level-set identity for the derivative against differentiating erf(sqrt(delta M))
    for d, M in [(0.5, 1.0), (3.0, 1.0), (2.0, 0.3)]:
        analytic = math.exp(-d * M) * math.sqrt(M) / math.sqrt(math.pi * d)
        assert oracles.quadratic_Delta_prime_formula(d, M) == pytest.approx(analytic, rel=1e-7)


# -- temperature solve -----------------------------------------------------


def _solve(alpha=0.99, **overrides):
    cfg = CalibrationConfig(c=0.1, schedule=(1000, 10000), tolerance=0.005, seed=3, **overrides)
    return solve_temperature(lambda d: GibbsDensity(Q1, d), 1.0, alpha, cfg, np.zeros(1), ONE_CHAIN)


def test_solver_near_closed_form():
    delta, trace = _solve()
    assert delta == pytest.approx(oracles.quadratic_Delta_root(0.99), abs=0.5)
    assert abs(trace[-1][1] - 0.99) <= 0.005
    assert all(0.0 <= p <= 1.0 for _, p, _ in trace)


def test_solver_non_existence():
    with pytest.raises(NonExistenceError):
        _solve(alpha=0.3, delta_lo=1.0)


def test_solver_bracket_error():
    with pytest.raises(BracketError):
        _solve(delta_hi=0.1, expand_cap=5.0)


def test_solver_trace_monotone():
    _, trace = _solve()
    # entries at the same chain length, ordered by delta, should not decrease beyond noise
    for length in {n for _, _, n in trace}:
        pts = sorted((d, p) for d, p, n in trace if n == length)
        retained = length - math.ceil(0.1 * length)
        for (d1, p1), (d2, p2) in zip(pts, pts[1:]):
            p = max(min((p1 + p2) / 2, 1 - 1e-3), 1e-3)
            # chain samples are correlated; inflate the binomial error
            se = 3 * math.sqrt(2 * p * (1 - p) / retained)
            assert p2 >= p1 - 3 * se


# -- end to end ------------------------------------------------------------


def test_calibrate_quadratic_closed_form():
    # reference point 1, so M = E[theta^2 / 2] over [0.9, 1.1] is ~0.50167
    cfg = CalibrationConfig(c=0.1, optimizer_budget=0, schedule=(1000, 10000, 100000), seed=1)
    res = calibrate(Q1, cfg, SamplerConfig(n_chains=1, target_acceptance=0.44, burn_in_fraction=0.1),
                    init=np.array([1.0]))
    assert res.lam == 0.0
    assert res.M == pytest.approx(0.5 * (1 + 0.01 / 3), abs=4 * res.M_stderr)
    assert abs(oracles.quadratic_Delta(res.delta, res.M) - 0.99) <= 0.005 + 0.002
    assert res.M_lambda == res.M + res.lam * float(res.theta_star @ res.theta_star)


def test_calibration_roundtrip():
    res = CalibrationResult(np.array([1.0, 2.0]), 0.5, 1.0, 0.1, 0.2, 2.0, 3.0, [(1.0, 0.5, 1000)], 0.1)
    back = CalibrationResult.from_dict(res.to_dict())
    assert back.delta_trace == res.delta_trace
    np.testing.assert_array_equal(back.theta_star, res.theta_star)


@pytest.mark.parametrize("kwargs", [dict(c=0), dict(c=0.1, nu=1.0), dict(c=0.1, alpha=1.0),
                                    dict(c=0.1, mc_samples_for_M=99), dict(c=0.1, delta_lo=0),
                                    dict(c=0.1, schedule=(500,))])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        CalibrationConfig(**kwargs)

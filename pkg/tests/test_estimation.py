import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilinear_mediation.estimation import (
    FitOptions,
    ParameterSpace,
    _Objective,
    _grad_steps,
    crude_growth_factors,
    fiml_loglik,
    fit,
    loglik_dense,
    numerical_gradient,
    starting_values,
)
from bilinear_mediation.model_core import Dataset, ParamsModel1, ParamsUnivariate
from bilinear_mediation.simulation import ConditionSpec, generate_dataset, population_params
from tests import oracles
from tests.factories import random_dataset, random_model2, random_params

LOG_2PI = math.log(2 * math.pi)


def _deterministic_model1(j=6):
    return ParamsModel1(mu_x=0.0, phi_x=1.0, knot_m=2.5, knot_y=2.5,
                        alpha_m=np.array([2.0, 100.0, 1.0]), alpha_y=np.array([1.0, 50.0, 3.0]),
                        b_xm=np.zeros(3), b_xy=np.zeros(3), b_my=np.zeros((3, 3)),
                        psi_m=np.zeros((3, 3)), psi_y=np.zeros((3, 3)),
                        theta_m=1.0, theta_y=1.0, theta_my=0.0)


# --------------------------------------------------------------- likelihood


def test_loglik_at_mean_with_identity_covariance():
    p = _deterministic_model1()
    times = np.arange(6.0)
    lam = np.column_stack([np.minimum(0, times - 2.5), np.ones(6), np.maximum(0, times - 2.5)])
    values = np.stack([lam @ p.alpha_m, lam @ p.alpha_y])[None]
    data = Dataset(("m", "y"), np.tile(times, (1, 2, 1)), values, x=np.zeros(1))
    d = 1 + 12
    assert fiml_loglik(p, data, 1) == pytest.approx(-0.5 * d * LOG_2PI, abs=1e-12)


def test_loglik_additive_over_identical_individuals():
    rng = np.random.default_rng(0)
    p = random_params(1, rng)
    one = random_dataset(p, 1, 6, rng)
    two = Dataset(one.processes, np.concatenate([one.times] * 2), np.concatenate([one.values] * 2),
                  x=np.concatenate([one.x] * 2))
    assert fiml_loglik(p, two) == pytest.approx(2 * fiml_loglik(p, one), rel=1e-14)


@pytest.mark.parametrize("model", [1, 2])
def test_loglik_matches_branch_oracle(model):
    rng = np.random.default_rng(7 + model)
    for _ in range(10):
        p = random_params(model, rng)
        data = random_dataset(p, int(rng.integers(1, 6)), 6, rng)
        assert abs(fiml_loglik(p, data) - oracles.loglik(p, data)) < 1e-8


def test_fast_and_dense_routes_agree():
    rng = np.random.default_rng(2)
    p = random_model2(rng)
    data = random_dataset(p, 40, 6, rng)
    assert fiml_loglik(p, data) == pytest.approx(loglik_dense(p, data), rel=1e-12)


def test_singular_growth_factor_covariance_uses_dense_route():
    p = _deterministic_model1()
    rng = np.random.default_rng(1)
    data = random_dataset(p, 4, 6, rng)
    assert fiml_loglik(p, data) == pytest.approx(oracles.loglik(p, data), abs=1e-8)


def test_infeasible_point_is_minus_infinity():
    rng = np.random.default_rng(4)
    p = random_params(1, rng)
    vec = p.to_vector()
    vec[ParamsModel1.names().index("theta_m")] = -1.0
    bad = ParamsModel1.from_vector(vec, validate=False)
    assert fiml_loglik(bad, random_dataset(p, 3, 6, rng)) == -np.inf


def test_loglik_rejects_model_mismatch():
    rng = np.random.default_rng(4)
    p = random_params(1, rng)
    with pytest.raises(ValueError):
        fiml_loglik(p, random_dataset(p, 3, 6, rng), model=2)


# ---------------------------------------------------------------- transform


def _space(model, lo=0.1, hi=4.9):
    cls = ParameterSpace(model, {})
    keys = ["knot"] if model == "univariate" else [f"knot_{p}" for p in cls.cls.PROCESSES]
    return ParameterSpace(model, {k: (lo, hi) for k in keys})


def test_unit_residual_variance_maps_to_zero():
    p = ParamsUnivariate(mean=np.zeros(3), psi=np.eye(3), knot=2.5, theta=1.0)
    v = _space("univariate").transform(p)
    assert v[ParamsUnivariate.names().index("theta")] == 0.0


def test_midpoint_knot_maps_to_zero():
    p = ParamsUnivariate(mean=np.zeros(3), psi=np.eye(3), knot=2.5, theta=1.0)
    v = _space("univariate").transform(p)
    assert v[ParamsUnivariate.names().index("knot")] == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1, 2, "univariate"]))
def test_transform_round_trip(seed, model):
    rng = np.random.default_rng(seed)
    p = random_params(model, rng)
    space = _space(model)
    v = space.transform(p)
    back = space.untransform(v)
    np.testing.assert_allclose(back.to_vector(), p.to_vector(), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(space.transform(back), v, rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=54, max_size=54))
def test_untransform_never_fails(coords):
    space = _space(2)
    p = space.untransform(np.array(coords))
    assert np.all(np.isfinite(p.to_vector()))


def test_transform_rejects_invalid_inputs():
    space = _space(1)
    p = random_params(1, np.random.default_rng(0))
    bad = ParamsModel1.from_vector(p.to_vector(), validate=False)
    object.__setattr__(bad, "theta_m", -1.0)
    with pytest.raises(ValueError):
        space.transform(bad)
    with pytest.raises(ValueError):
        space.transform(p.replace(knot_m=10.0))


# ---------------------------------------------------------- starting values


def test_crude_factors_exact_on_noise_free_trajectory():
    times = np.tile(np.arange(10.0), (5, 1))
    truth = np.array([3.0, 80.0, -1.5])
    knot = 4.5
    values = truth[1] + truth[0] * np.minimum(0, times - knot) + truth[2] * np.maximum(0, times - knot)
    factors, k, resid = crude_growth_factors(times, values)
    assert k == knot
    np.testing.assert_allclose(factors[:, [0, 2]], np.tile(truth[[0, 2]], (5, 1)), atol=1e-6)
    np.testing.assert_allclose(factors[:, 1], truth[1], atol=1e-6)
    assert resid == pytest.approx(0.0, abs=1e-12)


def test_starting_values_flat_data():
    times = np.tile(np.arange(6.0), (8, 1, 1))
    data = Dataset(("u",), times, np.full(times.shape, 7.0))
    start = starting_values(data, "univariate")
    assert start.mean[0] == 0.0 and start.mean[2] == 0.0
    assert start.knot == np.median(times)


def test_starting_values_fallback_with_few_points():
    times = np.tile(np.arange(3.0), (4, 1))
    values = 2.0 * times + 1.0
    factors, knot, _ = crude_growth_factors(times, values)
    assert knot == 1.0
    np.testing.assert_allclose(factors[:, 0], 2.0)
    np.testing.assert_allclose(factors[:, 2], 2.0)


@pytest.mark.parametrize("model", [1, 2])
def test_starting_loglik_finite(model):
    spec = ConditionSpec(model=model, n=300, J=6, knots=(2.5,) * (model + 1))
    truth = population_params(spec)
    data = generate_dataset(truth, 300, 6, model, np.random.default_rng(5))
    start = starting_values(data, model)
    assert np.isfinite(fiml_loglik(start, data))
    assert np.all(start.b_xm == 0)


# ---------------------------------------------------------------- gradients


def test_gradient_richardson_consistency():
    rng = np.random.default_rng(8)
    spec = ConditionSpec(model=1, n=60, J=6, knots=(2.5, 2.5))
    data = generate_dataset(population_params(spec), 60, 6, 1, rng)
    space = ParameterSpace.from_dataset(data, 1)
    obj = _Objective(data, space)
    base = space.transform(starting_values(data, 1))
    worst = 0.0
    for _ in range(20):
        v = base + rng.normal(scale=0.1, size=base.size)
        h = _grad_steps(v)
        g1 = numerical_gradient(obj, v, h)
        g2 = numerical_gradient(obj, v, h / 2)
        scale = np.maximum(np.abs(g2), 1.0)
        worst = max(worst, float(np.max(np.abs(g1 - g2) / scale)))
    assert worst < 1e-4


# ---------------------------------------------------------------------- fit


@pytest.fixture(scope="module")
def recovery_fit():
    spec = ConditionSpec(model=1, n=1000, J=10, knots=(4.5, 4.5))
    truth = population_params(spec)
    data = generate_dataset(truth, 1000, 10, 1, np.random.default_rng(99))
    return truth, data, fit(data, 1, FitOptions(seed=1))


def test_fit_result_invariants(recovery_fit):
    _, _, res = recovery_fit
    assert res.converged
    assert res.grad_norm < 1e-6
    assert np.all(res.se >= 0)
    assert np.all(res.ci_low <= res.ci_high)
    np.testing.assert_allclose(res.ci_high - res.estimates, 1.96 * res.se, rtol=1e-12)
    converged = [ll for ll, ok in zip(res.start_logliks, res.start_converged) if ok]
    assert res.loglik >= max(converged)


def test_standard_errors_calibrated_at_large_n(recovery_fit):
    truth, _, res = recovery_fit
    z = np.abs(res.estimates - truth.to_vector()) / res.se
    assert np.mean(z < 4) >= 0.95


def test_fit_invariant_to_row_order():
    spec = ConditionSpec(model=1, n=150, J=6, knots=(2.5, 2.5))
    data = generate_dataset(population_params(spec), 150, 6, 1, np.random.default_rng(3))
    perm = np.random.default_rng(4).permutation(data.n)
    start = starting_values(data, 1)
    a = fit(data, 1, FitOptions(seed=0), start=start)
    b = fit(data.take(perm), 1, FitOptions(seed=0), start=start)
    assert a.converged and b.converged
    assert np.max(np.abs(a.estimates - b.estimates)) < 1e-8


def test_best_start_reported_when_none_converge():
    spec = ConditionSpec(model=1, n=80, J=6, knots=(2.5, 2.5))
    data = generate_dataset(population_params(spec), 80, 6, 1, np.random.default_rng(6))
    res = fit(data.process("m"), "univariate", FitOptions(gtol=1e-300, max_starts=3, max_iter=20,
                                                          polish_steps=0))
    assert res.status == "failed"
    assert res.n_starts == 3
    assert res.loglik == max(res.start_logliks)


def test_under_identified_fit_is_flagged():
    spec = ConditionSpec(model=1, n=20, J=6, knots=(2.5, 2.5))
    data = generate_dataset(population_params(spec), 20, 6, 1, np.random.default_rng(2))
    res = fit(data, 1, FitOptions(max_starts=1))
    assert res.status == "failed" or not res.se_available
    assert not res.se_available
    assert np.all(np.isnan(res.se))


def test_null_coefficients_rarely_significant(null_condition_result):
    res = null_condition_result
    cols = [res.names.index(f"b_xm_{s}") for s in ("1", "g", "2")]
    first = slice(0, 100)
    ok = np.all(np.abs(res.estimates[first, cols]) < 3 * res.ses[first, cols], axis=1)
    assert ok.mean() >= 0.95

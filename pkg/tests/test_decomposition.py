import math

import numpy as np
import pytest

from tailcast.decomposition import (
    EULER_GAMMA,
    DecompositionReport,
    empirical_decomposition,
    estimator_error_mc,
    hazard_diagnostic,
    k_sweep,
    local_quadratic_fit,
    nominal_curvature_coefficient,
    occupancy_probability,
    offset_functional,
    offset_functional_derivative,
    rank_coefficient_mc,
    split_mismatch,
)
from tailcast.distributions import Exponential, Gaussian, Mixture, ShiftedExponential, Uniform
from tailcast.forecaster import PlottingScheme, plotting_positions
from tailcast.rng import stream


def test_offset_functional_is_line_solution():
    # independent oracle: fit a_j = -log j on t_j by OLS and solve for the
    # t at which the fitted line reaches the requested value r
    rng = np.random.default_rng(0)
    for k in (3, 5, 10):
        t = np.sort(rng.standard_normal(k))[::-1]
        a = -np.log(np.arange(1, k + 1))
        slope, intercept = np.polynomial.polynomial.polyfit(t, a, 1)[::-1]
        for r in (0.5, math.log(10.0)):
            expected = (r - intercept) / slope
            assert offset_functional(t, r) == pytest.approx(expected, rel=1e-10)


def test_offset_functional_vectorized():
    rng = np.random.default_rng(1)
    t = rng.standard_normal((50, 10))
    vals = offset_functional(t, 2.0)
    assert vals.shape == (50,)
    assert vals[7] == pytest.approx(offset_functional(t[7], 2.0))


def test_offset_functional_derivative_matches_finite_differences():
    rng = np.random.default_rng(2)
    t = np.sort(rng.standard_normal(10))[::-1]
    v = rng.standard_normal(10)
    r = math.log(10.0)
    h = 1e-7
    num = (offset_functional(t + h * v, r) - offset_functional(t - h * v, r)) / (2 * h)
    assert offset_functional_derivative(t, v, r) == pytest.approx(num, rel=1e-6)


def test_rank_coefficient_reference_value():
    # (k, R) = (10, 10): the rank bias against the realized deploy maximum
    out = rank_coefficient_mc(10, 10.0, 200_000, stream(0, 0))
    assert abs(out["b_inv"] - 0.794) < 4 * out["se"] + 0.003
    assert out["b_inv_tilde"] == pytest.approx(out["b_inv"] + EULER_GAMMA)


def test_rank_coefficient_validation():
    with pytest.raises(ValueError):
        rank_coefficient_mc(10, 1.0, 100, stream(0, 0))
    with pytest.raises(ValueError):
        rank_coefficient_mc(10, 10.0, 0, stream(0, 0))


def test_nominal_curvature_coefficient_reference():
    assert nominal_curvature_coefficient(10, math.log(10.0)) == pytest.approx(-11.7275, abs=5e-4)
    # independent route: finite-difference the line-fit solution on u -> u^2
    k, r = 10, math.log(10.0)
    a = -np.log(np.arange(1, k + 1))
    h = 1e-7
    num = (offset_functional(a + h * a * a, r) - offset_functional(a - h * a * a, r)) / (2 * h)
    assert nominal_curvature_coefficient(k, r) == pytest.approx(num - r * r, rel=1e-5)
    assert nominal_curvature_coefficient(10, 0.0) < 0


def test_occupancy_probability_closed_forms():
    m, N, eps = 96, 1920, 1.54e-3
    exact, approx = occupancy_probability(m, N, eps)
    assert exact == pytest.approx((1 - eps) ** m * (1 - (1 - eps) ** N), rel=1e-12)
    assert approx == pytest.approx(math.exp(-m * eps) * (1 - math.exp(-N * eps)), rel=1e-12)
    assert abs(exact - approx) < 0.01
    assert occupancy_probability(10, 100, 0.0) == (0.0, 0.0)


def test_occupancy_probability_monte_carlo():
    m, N, eps = 20, 200, 0.02
    exact, _ = occupancy_probability(m, N, eps)
    rng = stream(3, 0)
    trials = 200_000
    hidden = (rng.binomial(m, eps, size=trials) == 0) & (rng.binomial(N, eps, size=trials) > 0)
    se = math.sqrt(exact * (1 - exact) / trials)
    assert hidden.mean() == pytest.approx(exact, abs=4 * se)


def test_estimator_error_exact_sampler_agrees_with_brute_force():
    # the fast order-statistic route must match a naive full-sample route
    dist = Exponential(1.0)
    m, N, k, trials = 200, 2000, 5, 3000
    fast, fast_se = estimator_error_mc(dist, m, N, k, trials, stream(4, 0))

    log_s = np.log(plotting_positions(m, k, PlottingScheme.WEIBULL))
    depth = math.log((N + 1.0) / 1.0)
    rng = stream(4, 1)
    errs = np.empty(trials)
    for t in range(trials):
        fit = np.sort(dist.sample(m, rng))[::-1][:k]
        xb = fit.mean()
        a = np.dot(fit - xb, log_s - log_s.mean()) / np.dot(fit - xb, fit - xb)
        b = log_s.mean() - a * xb
        errs[t] = -(depth + b) / a - dist.sample(N, rng).max()
    brute, brute_se = errs.mean(), errs.std(ddof=1) / math.sqrt(trials)
    assert fast == pytest.approx(brute, abs=3.5 * math.hypot(fast_se, brute_se))


def test_estimator_error_population_quantile_target():
    dist = Exponential(1.0)
    mean, se = estimator_error_mc(dist, 1000, 10_000, 10, 20_000, stream(5, 0),
                                  target="population_quantile")
    # tilde coefficient at (k, R) = (10, 10) is about 1.371 in q' = 1 units
    assert mean == pytest.approx(1.371, abs=3 * se + 0.05)
    with pytest.raises(ValueError):
        estimator_error_mc(dist, 100, 50, 10, 10, stream(5, 1))
    with pytest.raises(ValueError):
        estimator_error_mc(dist, 100, 1000, 10, 10, stream(5, 1), target="bogus")


def test_local_quadratic_fit_recovers_exact_quadratic():
    n = 20_000
    depths = np.log((n + 1.0) / np.arange(1, n + 1))
    y0 = math.log(500)
    c0, c1, c2 = 2.0, 1.5, -0.4
    scores = c0 + c1 * (depths - y0) + c2 * (depths - y0) ** 2
    q1, q2, count = local_quadratic_fit(scores, y0, delta=0.5)
    assert q1 == pytest.approx(c1, rel=1e-9)
    assert q2 == pytest.approx(2 * c2, rel=1e-9)
    assert count >= 5
    with pytest.raises(ValueError):
        local_quadratic_fit(scores[:20], math.log(500), delta=0.01)


def test_empirical_decomposition_closure_identity():
    rep = empirical_decomposition(Exponential(1.0), 500, 5000, 10, 500, stream(6, 0),
                                  rank_trials=50_000)
    assert rep.closure_gap() == pytest.approx(0.0, abs=1e-12)
    assert rep.occupancy == 0.0  # no mixture structure
    units = rep.score_units()
    assert units["rank"] == pytest.approx(rep.rank * rep.q1_hat)


def test_empirical_decomposition_mixture_has_occupancy():
    mix = Mixture(Exponential(1.0), ShiftedExponential(1.0, 4.0), eps=5e-3)
    rep = empirical_decomposition(mix, 200, 2000, 5, 300, stream(7, 0),
                                  rank_trials=50_000)
    assert rep.occupancy > 0.0
    assert rep.closure_gap() == pytest.approx(0.0, abs=1e-12)


def test_empirical_decomposition_score_input_folds_occupancy():
    scores = Exponential(1.0).sample(60_000, stream(8, 0))
    rep = empirical_decomposition(scores, 500, 5000, 10, 300, stream(8, 1),
                                  rank_trials=50_000)
    assert rep.occupancy == 0.0
    assert rep.closure_gap() == pytest.approx(0.0, abs=1e-12)


def test_empirical_decomposition_partition_sampler_needs_enough_scores():
    scores = Exponential(1.0).sample(1000, stream(9, 0))
    with pytest.raises(ValueError):
        empirical_decomposition(scores, 500, 5000, 10, 50, stream(9, 1),
                                sampler="partition_permutation", rank_trials=1000)


def test_k_sweep_shapes_and_kbound():
    table = k_sweep(Exponential(1.0), 200, 10.0, [5, 10], 200, stream(10, 0))
    assert [row["k"] for row in table] == [5, 10]
    for row in table:
        assert math.isfinite(row["mean_qprime"]) and row["se_qprime"] >= 0
    with pytest.raises(ValueError):
        k_sweep(Exponential(1.0), 50, 10.0, [100], 10, stream(10, 1))


def test_hazard_diagnostic_flat_for_exponential():
    scores = Exponential(1.0).sample(200_000, stream(11, 0))
    grid = np.linspace(0.5, 4.0, 15)
    diag = hazard_diagnostic(scores, grid)
    # Exp(1) hazard is identically 1: log hazard near zero on the grid body
    assert np.nanmax(np.abs(diag["log_hazard"][:-2])) < 0.1
    with pytest.raises(ValueError):
        hazard_diagnostic(scores[:10], grid)


def test_split_mismatch_detects_shift():
    rng = stream(12, 0)
    base = Gaussian(0.0, 1.0).sample(50_000, rng)
    shifted = base + 0.75
    gap = split_mismatch(shifted, base, depth=math.log(100))
    assert gap == pytest.approx(0.75, abs=0.05)
    same = split_mismatch(base, base, depth=math.log(100))
    assert same == pytest.approx(0.0, abs=1e-12)


def test_uniform_reverse_occupancy_signature_small_scale():
    # bounded support leaves a large positive residual even at modest scale
    rep = empirical_decomposition(Uniform(0.0, 1.0), 1000, 10_000, 10, 400,
                                  stream(13, 0), rank_trials=100_000)
    assert rep.residual > 1.0
    assert rep.curvature > 0.0

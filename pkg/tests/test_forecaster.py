import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailcast.forecaster import (
    EmptyRankSetError,
    LossSpace,
    PlottingScheme,
    RankWeighting,
    ScoreTransform,
    TiedScoresError,
    deploy_depths,
    extrapolated_ranks,
    fit_tail,
    forecast_errors,
    plotting_positions,
    predict_at_depth,
    predict_quantile,
    rank_weights,
    read_score_file,
    write_score_file,
)


def test_plotting_position_schemes():
    M, k = 100, 3
    i = np.arange(1, 4, dtype=float)
    np.testing.assert_allclose(plotting_positions(M, k, PlottingScheme.EMPIRICAL), i / 100)
    np.testing.assert_allclose(plotting_positions(M, k, PlottingScheme.WEIBULL), i / 101)
    np.testing.assert_allclose(plotting_positions(M, k, PlottingScheme.HAZEN), (i - 0.5) / 100)
    np.testing.assert_allclose(plotting_positions(M, k, PlottingScheme.GRINGORTEN),
                               (i - 0.44) / 100.12)


def test_plotting_positions_bounds():
    with pytest.raises(ValueError):
        plotting_positions(10, 1)
    with pytest.raises(ValueError):
        plotting_positions(10, 11)


def test_fit_tail_recovers_exact_line():
    # scores placed exactly on log S = a*psi + b invert the line exactly
    M, k = 1000, 10
    a_true, b_true = -2.0, 3.0
    log_s = np.log(plotting_positions(M, k))
    scores = (log_s - b_true) / a_true
    fit = fit_tail(scores, M)
    assert fit.a == pytest.approx(a_true, rel=1e-12)
    assert fit.b == pytest.approx(b_true, rel=1e-12)
    assert fit.k == k and fit.M == M


def test_fit_tail_rejects_ties_and_order():
    with pytest.raises(TiedScoresError):
        fit_tail([3.0, 2.0, 2.0], 100)
    with pytest.raises(ValueError):
        fit_tail([1.0, 2.0, 3.0], 100)
    with pytest.raises(ValueError):
        fit_tail([5.0], 100)


def test_predict_quantile_inverts_at_depth():
    M = 1000
    log_s = np.log(plotting_positions(M, 10))
    scores = (log_s - 1.0) / -1.0
    fit = fit_tail(scores, M)
    # line is log S = -psi + 1, so Q(n) = log n + 1
    assert predict_quantile(fit, 10**6) == pytest.approx(math.log(10**6) + 1.0, rel=1e-9)
    with pytest.raises(ValueError):
        predict_quantile(fit, 1)


def test_predict_requires_negative_slope():
    from tailcast.forecaster import TailFit

    fit = TailFit(a=0.5, b=0.0, k=5, M=100, scheme=PlottingScheme.WEIBULL,
                  transform=ScoreTransform.IDENTITY, fit_depth_max=3.0)
    with pytest.raises(ValueError):
        predict_at_depth(fit, 5.0)


def test_extrapolated_ranks_canonical_pair():
    # (M, N) = (96, 1920): ranks with (N+1)/j > M+1, i.e. j <= 19
    J = extrapolated_ranks(96, 1920, 10)
    np.testing.assert_array_equal(J, np.arange(1, 20))


def test_extrapolated_ranks_requires_deeper_deploy():
    with pytest.raises(EmptyRankSetError):
        extrapolated_ranks(100, 50, 10)


def test_gumbel_prob_transform_roundtrip():
    t = ScoreTransform.GUMBEL_PROB
    p = np.array([1e-8, 1e-3, 0.4, 0.99])
    psi = t.forward(p)
    np.testing.assert_allclose(t.inverse(psi), p, rtol=1e-12)
    np.testing.assert_allclose(t.inverse_log(psi), np.log(p), rtol=1e-9)
    with pytest.raises(ValueError):
        t.forward(np.array([0.0]))


def test_rank_weights_normalized_and_log_uniform():
    J = np.arange(1, 20)
    w = rank_weights(J, 1920, RankWeighting.DEPLOY_LOG_UNIFORM)
    assert w.sum() == pytest.approx(1.0)
    expected = np.log((J + 1) / J)
    np.testing.assert_allclose(w, expected / expected.sum())
    wu = rank_weights(J, 1920, RankWeighting.RANK_UNIFORM)
    np.testing.assert_allclose(wu, np.full(19, 1 / 19))
    wd = rank_weights(J, 1920, RankWeighting.DEPLOY_UNIFORM)
    assert wd[0] > wd[-1]  # piles onto the deepest ranks


def test_forecast_errors_zero_on_perfect_line():
    M, N, k = 96, 1920, 10
    a, b = -1.0, 0.0
    fit_scores = (np.log(plotting_positions(M, k)) - b) / a
    fit = fit_tail(fit_scores, M)
    deploy = (np.log(np.arange(1, N + 1) / (N + 1.0)) - b) / a
    J = extrapolated_ranks(M, N, k)
    residuals, loss = forecast_errors(fit, deploy, J)
    np.testing.assert_allclose(residuals, 0.0, atol=1e-10)
    assert loss == pytest.approx(0.0, abs=1e-20)


def test_forecast_errors_inverse_transformed_space():
    # with the probability transform, residuals compare log p values
    M, N, k = 50, 1000, 5
    rng = np.random.default_rng(0)
    p = np.sort(rng.uniform(size=M))
    psi = ScoreTransform.GUMBEL_PROB.forward(p)[::-1]
    fit = fit_tail(ScoreTransform.GUMBEL_PROB.inverse(psi[:k]), M,
                   transform=ScoreTransform.GUMBEL_PROB)
    deploy = ScoreTransform.GUMBEL_PROB.inverse(
        np.sort(ScoreTransform.GUMBEL_PROB.forward(rng.uniform(size=N)))[::-1])
    J = extrapolated_ranks(M, N, k)
    res_t, _ = forecast_errors(fit, deploy, J, loss_space=LossSpace.TRANSFORMED)
    res_i, _ = forecast_errors(fit, deploy, J, loss_space=LossSpace.INVERSE_TRANSFORMED)
    assert res_t.shape == res_i.shape
    assert not np.allclose(res_t, res_i)


def test_forecast_errors_requires_enough_deploy_scores():
    M = 96
    fit_scores = (np.log(plotting_positions(M, 10))) / -1.0
    fit = fit_tail(fit_scores, M)
    with pytest.raises(ValueError):
        forecast_errors(fit, np.array([5.0, 4.0]), np.array([1, 2, 3]))


def test_deploy_depths_weibull():
    d = deploy_depths(1920, ranks=np.array([1, 19]))
    np.testing.assert_allclose(d, [math.log(1921.0), math.log(1921.0 / 19)])


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=2, max_value=20), st.integers(min_value=30, max_value=400))
def test_fit_tail_roundtrips_random_lines(k, M):
    rng = np.random.default_rng(k * 1000 + M)
    a = -float(rng.uniform(0.2, 5.0))
    b = float(rng.uniform(-3.0, 3.0))
    scores = (np.log(plotting_positions(M, k)) - b) / a
    fit = fit_tail(scores, M)
    assert fit.a == pytest.approx(a, rel=1e-9)
    assert fit.b == pytest.approx(b, rel=1e-7, abs=1e-9)


def test_score_file_roundtrip(tmp_path):
    path = tmp_path / "scores.txt"
    scores = np.array([1.5, -2.25, 3e-8])
    write_score_file(path, scores)
    np.testing.assert_allclose(read_score_file(path), scores)


def test_score_file_comments_and_blanks(tmp_path):
    path = tmp_path / "scores.txt"
    path.write_text("# header\n1.0\n\n2.0  # inline comment\n")
    np.testing.assert_allclose(read_score_file(path), [1.0, 2.0])

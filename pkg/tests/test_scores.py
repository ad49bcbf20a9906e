import numpy as np
import pytest

from ratefactor.core import SQRT, DataError, FactorModel, weekday_sequence
from ratefactor.scores import (
    RateForecast,
    ScoreForecastModel,
    bootstrap_scores,
    fit_score_model,
    forecast_rates,
    forecast_scores,
    nested_slope_f_test,
)


def _ar_path(a, b, sd, n, seed=0, start_day=1, slopes_by_day=None):
    rng = np.random.default_rng(seed)
    days = weekday_sequence(start_day, n)
    x = np.empty(n)
    x[0] = a[days[0] - 1]
    for i in range(1, n):
        slope = b if slopes_by_day is None else slopes_by_day[days[i - 1] - 1]
        x[i] = a[days[i - 1] - 1] + slope * x[i - 1] + sd * rng.standard_normal()
    return x, days


def _model(a, b, last, day, resid=None):
    a = np.atleast_2d(np.asarray(a, float))
    K = a.shape[0]
    resid = np.zeros((10, K)) if resid is None else resid
    return ScoreForecastModel(a, np.asarray(b, float).reshape(K), resid, resid.std(axis=0), np.asarray(last, float).reshape(K), day)


def test_noiseless_recovery():
    x = np.empty(40)
    x[0] = 3.0
    for i in range(1, 40):
        x[i] = 0.5 * x[i - 1]
    x += 0.0
    days = weekday_sequence(1, 40)
    sm = fit_score_model(x[:, None], days)
    assert sm.slopes[0] == pytest.approx(0.5, abs=1e-10)
    np.testing.assert_allclose(sm.intercepts, 0.0, atol=1e-10)


def test_pure_weekday_forecast():
    a = np.arange(1.0, 6.0)
    sm = _model(a, [0.0], [17.0], 3)
    assert forecast_scores(sm)[0] == 3.0
    assert forecast_scores(sm, last_scores=[-4.0], last_day=5)[0] == 5.0


def test_random_walk_fixed_point():
    sm = _model(np.zeros(5), [1.0], [2.5], 2)
    assert forecast_scores(sm, h=3)[0] == 2.5


def test_one_step_scalar():
    sm = _model(np.arange(1.0, 6.0), [0.5], [2.0], 3)
    assert forecast_scores(sm)[0] == pytest.approx(4.0, abs=1e-15)


def test_estimates_within_three_standard_errors():
    a = np.arange(1.0, 6.0)
    x, days = _ar_path(a, 0.6, 0.1, 500, seed=9)
    sm = fit_score_model(x[:, None], days)
    # independent oracle: normal equations for the same design
    prev = days[:-1]
    X = np.column_stack([(prev == d).astype(float) for d in range(1, 6)] + [x[:-1]])
    cov = np.linalg.inv(X.T @ X) * sm.residual_sd[0] ** 2
    se = np.sqrt(np.diag(cov))
    est = np.concatenate([sm.intercepts[0], sm.slopes])
    truth = np.concatenate([a, [0.6]])
    assert np.all(np.abs(est - truth) < 3 * se)


def test_f_test_size():
    rejections = 0
    for r in range(200):
        x, days = _ar_path(np.arange(1.0, 6.0), 0.5, 1.0, 120, seed=1000 + r)
        _, p = nested_slope_f_test(x, days)
        rejections += p < 0.05
    assert 0.02 <= rejections / 200 <= 0.09


def test_f_test_power():
    x, days = _ar_path(np.full(5, 2.0), None, 0.05, 200, seed=3, slopes_by_day=[0.1, 0.3, 0.5, 0.7, 0.9])
    F, p = nested_slope_f_test(x, days)
    assert p < 0.01 and F > 0


def test_f_test_degrees_of_freedom():
    x, days = _ar_path(np.arange(1.0, 6.0), 0.5, 1.0, 60, seed=4)
    F, p = nested_slope_f_test(x, days)
    from scipy import stats

    assert p == pytest.approx(stats.f.sf(F, 4, 60 - 11), rel=1e-12)


def test_f_test_identical_fits():
    # noiseless common-slope series: both models fit it exactly
    x, days = _ar_path(np.arange(1.0, 6.0), 0.5, 0.0, 30, seed=0)
    F, p = nested_slope_f_test(x, days)
    assert (F, p) == (0.0, 1.0)


def test_missing_weekday_rejected():
    days = np.array([1, 2, 3, 4, 1, 2, 3, 4, 1, 2])
    with pytest.raises(DataError, match="weekday"):
        fit_score_model(np.arange(10.0)[:, None], days)


def test_point_only_forecast_has_no_ensemble():
    fm = FactorModel(SQRT, np.ones((3, 1)), np.array([[1.0], [2.0]]))
    sm = _model(np.full(5, 3.0), [0.0], [3.0], 1)
    fc = forecast_rates(fm, sm)
    assert fc.ensemble is None and fc.n_boot == 0
    np.testing.assert_array_equal(fc.point_rates, [9.0, 36.0])


def test_zero_residuals_degenerate_bootstrap():
    fm = FactorModel(SQRT, np.ones((3, 1)), np.array([[1.0], [2.0]]))
    sm = _model(np.full(5, 3.0), [0.2], [1.0], 1)
    fc = forecast_rates(fm, sm, n_boot=50, seed=1)
    np.testing.assert_allclose(fc.ensemble, np.tile(fc.point_rates, (50, 1)), rtol=1e-14)


def test_bootstrap_seeded_and_prefix_stable():
    rng = np.random.default_rng(0)
    sm = _model(rng.normal(size=(2, 5)), [0.3, 0.5], [1.0, -1.0], 4, resid=rng.normal(size=(30, 2)))
    a = bootstrap_scores(sm, 3, 100, seed=8)
    b = bootstrap_scores(sm, 3, 100, seed=8)
    c = bootstrap_scores(sm, 3, 40, seed=8)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[:40], c)
    assert not np.array_equal(a, bootstrap_scores(sm, 3, 100, seed=9))


def test_json_round_trips():
    rng = np.random.default_rng(1)
    sm = _model(rng.normal(size=(2, 5)), [0.3, 0.5], [1.0, -1.0], 4, resid=rng.normal(size=(12, 2)))
    text = sm.to_json()
    assert ScoreForecastModel.from_json(text).to_json() == text
    fm = FactorModel(SQRT, np.ones((3, 2)), np.abs(rng.normal(2, 0.2, (6, 2))))
    fc = forecast_rates(fm, sm, n_boot=20, seed=3)
    doc = fc.to_json()
    back = RateForecast.from_json(doc)
    np.testing.assert_array_equal(back.point_rates, fc.point_rates)
    np.testing.assert_array_equal(back.ensemble_scores, fc.ensemble_scores)
    assert fc.ensemble_csv().splitlines()[0] == "replicate,rate1,rate2,rate3,rate4,rate5,rate6"


def test_factor_mismatch():
    fm = FactorModel(SQRT, np.ones((3, 2)), np.ones((4, 2)))
    with pytest.raises(DataError):
        forecast_rates(fm, _model(np.zeros(5), [0.1], [1.0], 1))

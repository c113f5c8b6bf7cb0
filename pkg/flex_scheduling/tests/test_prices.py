"""Tests for price series, forecasting, covariance and synthetic prices."""

# %%
import numpy as np
import pandas as pd
import pytest
from flex_scheduling.resources.market import prices
from flex_scheduling.resources.market.timegrid import TimeGrid
from flex_scheduling.tests.conftest import START_DATE, random_psd


# %%
def test_price_series_rejects_gaps_and_duplicates():
    index = pd.date_range("2019-07-01", periods=4, freq="1h")
    with pytest.raises(ValueError, match="gap"):
        prices.PriceSeries(pd.Series([1.0, 2.0, 3.0], index=index.delete(2)), "hourly")
    with pytest.raises(ValueError, match="duplicate"):
        prices.PriceSeries(pd.Series([1.0] * 4, index=index[[0, 1, 1, 2]]), "hourly")
    with pytest.raises(ValueError):
        prices.PriceSeries(pd.Series([1.0] * 4, index=index), "daily")


def test_price_series_allows_negative_rt():
    index = pd.date_range("2019-07-01", periods=96, freq="15min")
    series = prices.PriceSeries(pd.Series(np.full(96, -150.0), index=index), "quarter-hourly")
    assert series.days() == [pd.Timestamp("2019-07-01").date()]


def test_price_csv_io(tmp_path):
    series = prices.series_from_days([np.arange(24.0), np.arange(24.0) + 1], START_DATE, "hourly")
    csv_path = tmp_path / "da.csv"
    prices.write_price_csv(series, csv_path)
    loaded = prices.read_price_csv(csv_path, "hourly")
    np.testing.assert_allclose(loaded.values.to_numpy(), series.values.to_numpy())
    assert loaded.days() == series.days()


def test_forecast_constant_history():
    series = prices.series_from_days([np.full(24, 42.0)] * 10, START_DATE, "hourly")
    target = pd.Timestamp("2019-07-11").date()
    np.testing.assert_allclose(prices.seasonal_baseline_forecast(series, target), 42.0)


def test_forecast_averages_recent_same_class_days():
    day_a = np.linspace(10, 30, 24)
    day_b = np.linspace(50, 20, 24)
    series = prices.series_from_days(
        [day_a if num % 2 == 0 else day_b for num in range(14)], START_DATE, "hourly"
    )
    # 2019-07-15 is a Monday; the last weekdays before it are 11th (A) and 12th (B)
    target = pd.Timestamp("2019-07-15").date()
    forecast = prices.seasonal_baseline_forecast(series, target, k=2)
    np.testing.assert_allclose(forecast, (day_a + day_b) / 2)


def test_forecast_needs_history():
    series = prices.series_from_days([np.ones(24)] * 6, START_DATE, "hourly")
    with pytest.raises(ValueError, match="history"):
        prices.seasonal_baseline_forecast(series, pd.Timestamp("2019-07-07").date())


def test_estimate_covariance_examples():
    cov = prices.estimate_covariance([[1.0, 0.0], [-1.0, 0.0]])
    np.testing.assert_allclose(cov, [[1.0, 0.0], [0.0, 0.0]], atol=1e-7)
    np.testing.assert_array_equal(prices.estimate_covariance([np.zeros(3)] * 4), np.zeros((3, 3)))
    eps = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(
        prices.estimate_covariance([eps] * 5), np.outer(eps, eps), atol=1e-7
    )


def test_estimate_covariance_errors():
    with pytest.raises(ValueError):
        prices.estimate_covariance([[1.0, 2.0]])
    with pytest.raises(ValueError):
        prices.estimate_covariance([[1.0, 2.0], [1.0, 2.0, 3.0]])


def test_covariance_recovery():
    true_cov = np.array(
        [
            [4.0, 1.2, 0.5, 0.0],
            [1.2, 3.0, 0.8, 0.2],
            [0.5, 0.8, 2.0, 0.4],
            [0.0, 0.2, 0.4, 1.0],
        ]
    )
    norm = np.linalg.norm(true_cov)
    shrinking = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        draws = rng.multivariate_normal(np.zeros(4), true_cov, size=2000)
        big = prices.estimate_covariance(draws)
        small = prices.estimate_covariance(draws[:50])
        err_big = np.linalg.norm(big - true_cov)
        shrinking += err_big < np.linalg.norm(small - true_cov)
        if seed == 0:
            assert err_big < 0.1 * norm
            np.testing.assert_array_equal(big, big.T)
            assert np.linalg.eigvalsh(big).min() >= -1e-8 * np.trace(big)
    assert shrinking >= 19


def test_condition_psd_clips_negative_eigenvalues():
    cov = prices.condition_psd([[1.0, 2.0], [2.0, 1.0]])
    assert np.linalg.eigvalsh(cov).min() >= 0
    prices.check_covariance(cov)


def test_rt_window_covariance():
    template = random_psd(np.random.default_rng(3), 12)
    np.testing.assert_array_equal(prices.rt_window_covariance(template, 12), template)
    np.testing.assert_array_equal(prices.rt_window_covariance(template, 1), template[:1, :1])
    assert np.linalg.eigvalsh(prices.rt_window_covariance(template, 7)).min() >= -1e-9
    with pytest.raises(ValueError):
        prices.rt_window_covariance(template, 13)


def test_rt_da_ratio_constructed():
    da = prices.series_from_days([np.full(24, 50.0)] * 3, START_DATE, "hourly")
    same = prices.series_from_days([np.full(96, 50.0)] * 3, START_DATE, "quarter-hourly")
    scaled = prices.series_from_days([np.full(96, 46.5)] * 3, START_DATE, "quarter-hourly")
    assert prices.rt_da_ratio(same, da) == pytest.approx(1.0)
    assert prices.rt_da_ratio(scaled, da) == pytest.approx(0.93)


def test_synth_prices_without_spikes_stay_near_da(reference_day):
    base = reference_day["da_price"].to_numpy()
    for seed in range(20):
        p_da, p_rt = prices.synth_prices(seed, base, spike_prob=0.0)
        assert np.all((p_da >= 0) & (p_da <= 100))
        assert np.max(np.abs(p_rt - 0.93 * np.repeat(p_da, 4))) <= 6 * 4.0


def test_synth_history_calibration(reference_day):
    base = reference_day["da_price"].to_numpy()
    da_series, rt_series = prices.synth_price_history(0, base, 200, START_DATE)
    assert len(da_series.days()) == 200
    assert da_series.values.min() >= 0 and da_series.values.max() <= 100
    assert prices.rt_da_ratio(rt_series, da_series) == pytest.approx(0.93, abs=0.02)


def test_synth_history_extends_without_redraw(reference_day):
    base = reference_day["da_price"].to_numpy()
    short_da, _ = prices.synth_price_history(4, base, 5, START_DATE)
    long_da, _ = prices.synth_price_history(4, base, 9, START_DATE)
    np.testing.assert_array_equal(
        short_da.values.to_numpy(), long_da.values.to_numpy()[: 5 * 24]
    )


def test_build_price_model_shapes(reference_day, tmp_path):
    grid = TimeGrid(hours=24, horizon_hours=3)
    da_series, rt_series = prices.synth_price_history(
        1, reference_day["da_price"].to_numpy(), 14, START_DATE
    )
    target = da_series.days()[-1]
    model = prices.build_price_model(da_series, rt_series, target, grid)
    assert model.p_da_hat.shape == (24,)
    assert model.p_rt_hat.shape == (96,)
    assert model.c_da.shape == (24, 24)
    assert model.c_rt_template.shape == (12, 12)

    prices.write_price_model(model, tmp_path / "model")
    loaded = prices.read_price_model(tmp_path / "model")
    np.testing.assert_allclose(loaded.c_rt_template, model.c_rt_template, rtol=1e-10)
    np.testing.assert_allclose(loaded.p_da_hat, model.p_da_hat, rtol=1e-10)


def test_build_price_model_ignores_target_day(reference_day):
    grid = TimeGrid(hours=24, horizon_hours=3)
    base = reference_day["da_price"].to_numpy()
    da_series, rt_series = prices.synth_price_history(2, base, 13, START_DATE)
    target = da_series.days()[-1]
    before = prices.build_price_model(da_series.before(target), rt_series.before(target), target, grid)
    full = prices.build_price_model(da_series, rt_series, target, grid)
    np.testing.assert_array_equal(before.p_da_hat, full.p_da_hat)
    np.testing.assert_array_equal(before.c_da, full.c_da)

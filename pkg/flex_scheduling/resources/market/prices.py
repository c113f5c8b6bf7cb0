"""Price series, forecasting, and forecast-error covariance.

Prices are stored in $/MWh throughout. Decision variables elsewhere
are in kW/kWh, so cost assembly multiplies by MWH_PER_KWH.

Forecast errors are modelled as zero-mean multivariate normal, the
covariance being the uncentered mean of outer products of historical
errors, conditioned to be PSD so that the risk terms stay convex.
"""

# %%
import os
import logging
from dataclasses import dataclass
from datetime import date, datetime, timedelta
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

MWH_PER_KWH = 1e-3
RT_DA_RATIO = 0.93
DA_PRICE_RANGE = (0.0, 100.0)
DA_WARN_RANGE = (-200.0, 2000.0)

RESOLUTIONS = {
    "hourly": pd.Timedelta(hours=1),
    "quarter-hourly": pd.Timedelta(minutes=15),
}


# %%
@dataclass(frozen=True)
class PriceSeries:
    """Uniformly spaced, strictly increasing price series in $/MWh.

    Parameters
    ----------
    values : pandas.Series
        prices indexed by a DatetimeIndex
    resolution : str
        "hourly" (DA) or "quarter-hourly" (RT)
    """

    values: pd.Series
    resolution: str

    def __post_init__(self):
        if self.resolution not in RESOLUTIONS:
            raise ValueError(
                f"ERROR: resolution must be one of {list(RESOLUTIONS)}, "
                f"got {self.resolution}"
            )
        idx = self.values.index
        if not isinstance(idx, pd.DatetimeIndex):
            raise ValueError("ERROR: price series requires a DatetimeIndex")
        if idx.has_duplicates:
            raise ValueError(f"ERROR: duplicate timestamp {idx[idx.duplicated()][0]}")
        if len(idx) > 1:
            steps = idx[1:] - idx[:-1]
            if (steps <= pd.Timedelta(0)).any():
                raise ValueError("ERROR: timestamps are not strictly increasing")
            if (steps != self.step).any():
                gap = idx[:-1][steps != self.step][0]
                raise ValueError(
                    f"ERROR: {self.resolution} series has a gap after {gap}"
                )
        if self.resolution == "hourly" and len(self.values):
            lo, hi = DA_WARN_RANGE
            if self.values.min() < lo or self.values.max() > hi:
                logger.warning(
                    f"DA prices outside [{lo}, {hi}] $/MWh: "
                    f"min {self.values.min():.1f}, max {self.values.max():.1f}"
                )

    @property
    def step(self):
        return RESOLUTIONS[self.resolution]

    @property
    def slots_per_day(self):
        return int(pd.Timedelta(days=1) / self.step)

    def days(self):
        """Calendar days fully covered by the series, in order."""
        counts = self.values.groupby(self.values.index.date).size()
        return [d for d, n in counts.items() if n == self.slots_per_day]

    def day_values(self, day):
        """Price vector of one calendar day."""
        start = pd.Timestamp(day)
        sel = self.values[start : start + pd.Timedelta(days=1) - self.step]
        if len(sel) != self.slots_per_day:
            raise ValueError(f"ERROR: series does not fully cover {day}")
        return sel.to_numpy(dtype=float)

    def before(self, day):
        """Sub-series strictly before a calendar day."""
        return PriceSeries(self.values[self.values.index < pd.Timestamp(day)], self.resolution)


@dataclass(frozen=True)
class ForecastErrorSample:
    """Forecast error vector (actual - forecast) for one day or window."""

    day: date
    errors: np.ndarray


# %%
def series_from_days(day_vectors, start_date, resolution):
    """Build a PriceSeries from consecutive per-day price vectors."""
    step = RESOLUTIONS[resolution]
    values = np.concatenate([np.asarray(v, dtype=float) for v in day_vectors])
    index = pd.date_range(pd.Timestamp(start_date), periods=len(values), freq=step)
    return PriceSeries(pd.Series(values, index=index, name="price"), resolution)


def read_price_csv(csv_path, resolution):
    """Read and validate a `timestamp,price` CSV.

    Parameters
    ----------
    csv_path : str
        path to CSV with ISO-8601 timestamps
    resolution : str
        "hourly" or "quarter-hourly"

    Returns
    -------
    PriceSeries
    """
    df = pd.read_csv(csv_path)
    missing = {"timestamp", "price"} - set(df.columns)
    if missing:
        raise ValueError(f"ERROR: {csv_path} missing columns {sorted(missing)}")
    index = pd.DatetimeIndex(pd.to_datetime(df["timestamp"]))
    series = pd.Series(df["price"].to_numpy(dtype=float), index=index, name="price")
    return PriceSeries(series, resolution)


def write_price_csv(price_series, csv_path):
    """Write a PriceSeries as `timestamp,price`."""
    df = pd.DataFrame(
        {
            "timestamp": price_series.values.index.strftime("%Y-%m-%dT%H:%M:%S"),
            "price": price_series.values.to_numpy(),
        }
    )
    df.to_csv(csv_path, index=False, float_format="%.6f")


# %%
def _weekday_class(day):
    return "weekend" if day.weekday() >= 5 else "weekday"


def seasonal_baseline_forecast(history, target_day, k=4, min_days=7):
    """Forecast a day's prices from recent days of the same class.

    Each slot is forecast as the mean of the same slot over the k most
    recent history days sharing the target's weekday class (weekday or
    weekend). Days on or after the target are ignored.

    Parameters
    ----------
    history : PriceSeries
        past prices at the target resolution
    target_day : datetime.date
        day to forecast
    k : int
        number of same-class days to average
    min_days : int
        minimum number of full history days required

    Returns
    -------
    numpy.ndarray
        forecast vector, one value per slot of the day
    """
    if k < 1:
        raise ValueError(f"ERROR: k must be >= 1, got {k}")
    target_day = pd.Timestamp(target_day).date()
    days = [d for d in history.days() if d < target_day]
    if len(days) < min_days:
        raise ValueError(
            f"ERROR: forecast needs {min_days} days of history, found {len(days)}"
        )
    same_class = [d for d in days if _weekday_class(d) == _weekday_class(target_day)]
    if not same_class:
        raise ValueError(
            f"ERROR: no {_weekday_class(target_day)} days in history before {target_day}"
        )
    chosen = same_class[-k:]
    return np.mean([history.day_values(d) for d in chosen], axis=0)


def forecast_errors(history, k=4, min_days=7):
    """Rolling out-of-sample forecast errors over a history.

    For every day with at least min_days full days before it, forecast
    that day from its past and record actual - forecast.

    Returns
    -------
    list of ForecastErrorSample
    """
    days = history.days()
    samples = []
    for pos, day in enumerate(days):
        if pos < min_days:
            continue
        forecast = seasonal_baseline_forecast(history.before(day), day, k, min_days)
        samples.append(ForecastErrorSample(day, history.day_values(day) - forecast))
    return samples


def window_error_samples(day_samples, grid):
    """Cut daily RT errors into hour-aligned MPC-window samples.

    Parameters
    ----------
    day_samples : list of ForecastErrorSample
        full-day RT errors, length grid.rt_len each
    grid : TimeGrid
        provides the untruncated window length 4*T_H

    Returns
    -------
    list of ForecastErrorSample
        every full-length window starting on an hour boundary
    """
    samples = []
    for sample in day_samples:
        for hour in range(grid.hours):
            window = grid.mpc_window(hour)
            if len(window) < grid.window_len:
                break
            samples.append(
                ForecastErrorSample(sample.day, sample.errors[window.start : window.stop])
            )
    return samples


# %%
def condition_psd(cov):
    """Symmetrize, clip negative eigenvalues, add ridge jitter.

    The jitter is 1e-8 * trace / d on the diagonal.
    """
    cov = np.asarray(cov, dtype=float)
    cov = 0.5 * (cov + cov.T)
    eig_val, eig_vec = np.linalg.eigh(cov)
    eig_val = np.clip(eig_val, 0.0, None)
    cov = (eig_vec * eig_val) @ eig_vec.T
    cov = 0.5 * (cov + cov.T)
    dim = cov.shape[0]
    cov[np.diag_indices(dim)] += 1e-8 * np.trace(cov) / dim
    return cov


def estimate_covariance(samples):
    """Uncentered mean-squared-error matrix of forecast errors.

    Computes (1/N) sum_k e_k e_k' and conditions it PSD. Errors are
    treated as zero-mean, no centering is applied.

    Parameters
    ----------
    samples : list of ForecastErrorSample or array-like
        N >= 2 error vectors of equal length d

    Returns
    -------
    numpy.ndarray
        d x d symmetric PSD matrix, ($/MWh)^2
    """
    vectors = [
        np.asarray(s.errors if isinstance(s, ForecastErrorSample) else s, dtype=float)
        for s in samples
    ]
    if len(vectors) < 2:
        raise ValueError(f"ERROR: need at least 2 error samples, got {len(vectors)}")
    lengths = {v.shape for v in vectors}
    if len(lengths) != 1 or len(vectors[0].shape) != 1:
        raise ValueError(f"ERROR: error samples have mismatched shapes {sorted(lengths)}")
    errors = np.vstack(vectors)
    return condition_psd(errors.T @ errors / errors.shape[0])


def rt_window_covariance(cov_template, window_len):
    """Leading principal submatrix of the RT template for a shorter window."""
    dim = cov_template.shape[0]
    if not 1 <= window_len <= dim:
        raise ValueError(f"ERROR: window length {window_len} outside [1, {dim}]")
    return cov_template[:window_len, :window_len].copy()


def rt_da_ratio(p_rt, p_da):
    """Ratio of mean hourly-averaged RT price to mean DA price.

    Parameters
    ----------
    p_rt : PriceSeries
        quarter-hourly RT prices
    p_da : PriceSeries
        hourly DA prices

    Returns
    -------
    float
    """
    rt_hourly = p_rt.values.resample("1h").mean().dropna()
    overlap = rt_hourly.index.intersection(p_da.values.index)
    if overlap.empty:
        raise ValueError("ERROR: RT and DA series do not overlap")
    da_mean = p_da.values.loc[overlap].mean()
    if da_mean == 0:
        raise ValueError("ERROR: DA mean price is zero over the overlap")
    return float(rt_hourly.loc[overlap].mean() / da_mean)


# %%
@dataclass(frozen=True)
class PriceModel:
    """Expected prices and error covariances used by both optimizers.

    Parameters
    ----------
    p_da_hat : numpy.ndarray
        DA price forecast, length T
    p_rt_hat : numpy.ndarray
        RT price forecast, length 4T
    c_da : numpy.ndarray
        T x T DA error covariance
    c_rt_template : numpy.ndarray
        4T_H x 4T_H RT error covariance, reused at every MPC hour
    """

    p_da_hat: np.ndarray
    p_rt_hat: np.ndarray
    c_da: np.ndarray
    c_rt_template: np.ndarray

    def __post_init__(self):
        hours = len(self.p_da_hat)
        if len(self.p_rt_hat) != 4 * hours:
            raise ValueError(
                f"ERROR: RT forecast length {len(self.p_rt_hat)} != 4 x {hours}"
            )
        if self.c_da.shape != (hours, hours):
            raise ValueError(f"ERROR: c_da shape {self.c_da.shape} != {(hours, hours)}")
        for name in ("c_da", "c_rt_template"):
            check_covariance(getattr(self, name), name)


def check_covariance(cov, name="covariance"):
    """Reject a non-symmetric or indefinite covariance."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"ERROR: {name} must be square, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise ValueError(f"ERROR: {name} is not symmetric")
    min_eig = np.linalg.eigvalsh(cov).min()
    if min_eig < -1e-8 * max(np.trace(cov), 1e-12):
        raise ValueError(f"ERROR: {name} is not PSD (min eigenvalue {min_eig:.3e})")


def build_price_model(da_history, rt_history, target_day, grid, k=4):
    """Forecast a target day and estimate covariances from history.

    Parameters
    ----------
    da_history, rt_history : PriceSeries
        prices strictly before target_day (later values are ignored)
    target_day : datetime.date
        day being scheduled
    grid : TimeGrid
        time structure, for the RT window template size
    k : int
        same-class days averaged by the forecaster

    Returns
    -------
    PriceModel
    """
    da_history = da_history.before(target_day)
    rt_history = rt_history.before(target_day)
    p_da_hat = seasonal_baseline_forecast(da_history, target_day, k)
    p_rt_hat = seasonal_baseline_forecast(rt_history, target_day, k)
    c_da = estimate_covariance(forecast_errors(da_history, k))
    rt_windows = window_error_samples(forecast_errors(rt_history, k), grid)
    c_rt = estimate_covariance(rt_windows)
    logger.info(
        f"Price model for {target_day}: {len(rt_windows)} RT window samples, "
        f"DA error std {np.sqrt(np.trace(c_da) / grid.hours):.2f} $/MWh"
    )
    return PriceModel(p_da_hat, p_rt_hat, c_da, c_rt)


# %%
def write_covariance_csv(cov, csv_path):
    """Dense row-major CSV with a header row of column indices."""
    pd.DataFrame(cov, columns=range(cov.shape[1])).to_csv(
        csv_path, index=False, float_format="%.12g"
    )


def read_covariance_csv(csv_path):
    return pd.read_csv(csv_path).to_numpy(dtype=float)


def write_price_model(model, out_dir):
    """Write a PriceModel as four CSVs in out_dir.

    Returns
    -------
    dict
        written file paths

        - [p-da-hat] = p_da_hat.csv (hour, price)

        - [p-rt-hat] = p_rt_hat.csv (slot, price)

        - [c-da] = c_da.csv

        - [c-rt] = c_rt.csv
    """
    if not os.path.exists(out_dir):
        os.makedirs(out_dir)
    out_files = {
        "p-da-hat": os.path.join(out_dir, "p_da_hat.csv"),
        "p-rt-hat": os.path.join(out_dir, "p_rt_hat.csv"),
        "c-da": os.path.join(out_dir, "c_da.csv"),
        "c-rt": os.path.join(out_dir, "c_rt.csv"),
    }
    pd.DataFrame(
        {"hour": range(len(model.p_da_hat)), "price": model.p_da_hat}
    ).to_csv(out_files["p-da-hat"], index=False, float_format="%.12g")
    pd.DataFrame(
        {"slot": range(len(model.p_rt_hat)), "price": model.p_rt_hat}
    ).to_csv(out_files["p-rt-hat"], index=False, float_format="%.12g")
    write_covariance_csv(model.c_da, out_files["c-da"])
    write_covariance_csv(model.c_rt_template, out_files["c-rt"])
    return out_files


def read_price_model(in_dir):
    """Read a PriceModel written by write_price_model."""
    p_da_hat = pd.read_csv(os.path.join(in_dir, "p_da_hat.csv"))["price"].to_numpy(float)
    p_rt_hat = pd.read_csv(os.path.join(in_dir, "p_rt_hat.csv"))["price"].to_numpy(float)
    return PriceModel(
        p_da_hat,
        p_rt_hat,
        read_covariance_csv(os.path.join(in_dir, "c_da.csv")),
        read_covariance_csv(os.path.join(in_dir, "c_rt.csv")),
    )


# %%
def synth_prices(
    seed,
    base_da_profile,
    spike_prob=0.02,
    spike_max=10.0,
    da_noise=3.0,
    rt_noise=4.0,
    rng=None,
):
    """Draw one synthetic day of DA and RT prices.

    DA is the base profile plus smooth noise, clipped to [0, 100]
    $/MWh. RT is 0.93 x DA held over each hour, plus Gaussian
    quarter-hourly noise and rare spikes of up to spike_max times the
    DA price, with random sign.

    Parameters
    ----------
    seed : int or sequence of int
        seed for numpy.random.default_rng, ignored when rng is given
    base_da_profile : array-like
        hourly base DA price, length 24
    spike_prob : float
        per-slot probability of a spike
    spike_max : float
        largest spike, as a multiple of the DA price
    da_noise : float
        standard deviation of the smooth DA noise, $/MWh
    rt_noise : float
        standard deviation of the RT quarter-hourly noise, $/MWh
    rng : numpy.random.Generator, optional

    Returns
    -------
    p_da, p_rt : numpy.ndarray
        hourly (length 24) and quarter-hourly (length 96) prices
    """
    base = np.asarray(base_da_profile, dtype=float)
    if base.shape != (24,):
        raise ValueError(f"ERROR: base DA profile must have length 24, got {base.shape}")
    rng = rng if rng is not None else np.random.default_rng(seed)

    # moving average of white noise, unit variance
    width = 5
    white = rng.normal(0.0, 1.0, size=base.size + width - 1)
    smooth = np.convolve(white, np.ones(width) / np.sqrt(width), mode="valid")
    p_da = np.clip(base + da_noise * smooth, *DA_PRICE_RANGE)

    da_up = np.repeat(p_da, 4)
    p_rt = RT_DA_RATIO * da_up + rng.normal(0.0, rt_noise, size=da_up.size)
    spikes = rng.random(da_up.size) < spike_prob
    n_spikes = int(spikes.sum())
    if n_spikes:
        sign = rng.choice([-1.0, 1.0], size=n_spikes)
        scale = rng.uniform(1.0, spike_max, size=n_spikes)
        p_rt[spikes] += sign * scale * da_up[spikes]
    return p_da, p_rt


def synth_price_history(seed, base_da_profile, n_days, start_date, weekend_factor=0.9, **kwargs):
    """Consecutive synthetic days as DA and RT PriceSeries.

    Day d is drawn from default_rng([seed, d]), so extending a history
    never changes the days already drawn. Weekend base prices are
    scaled by weekend_factor.

    Returns
    -------
    da_series, rt_series : PriceSeries
    """
    start = pd.Timestamp(start_date).date()
    base = np.asarray(base_da_profile, dtype=float)
    da_days, rt_days = [], []
    for day_num in range(n_days):
        day = start + timedelta(days=day_num)
        day_base = base * (weekend_factor if day.weekday() >= 5 else 1.0)
        rng = np.random.default_rng([seed, day_num])
        p_da, p_rt = synth_prices(None, day_base, rng=rng, **kwargs)
        da_days.append(p_da)
        rt_days.append(p_rt)
    return (
        series_from_days(da_days, start, "hourly"),
        series_from_days(rt_days, start, "quarter-hourly"),
    )


def parse_day(value):
    """Coerce a str/date/datetime to datetime.date."""
    if isinstance(value, datetime):
        return value.date()
    if isinstance(value, date):
        return value
    return pd.Timestamp(value).date()

r"""Shared builders for the flex_scheduling tests.

Small pools and price histories are drawn from the bundled reference
day, scaled down, so every workflow test runs in seconds.

Examples
--------
cd flex_scheduling
pytest tests
pytest tests/test_real_time.py -k oracle
"""

# %%
import os
import numpy as np
import pandas as pd
import pytest
from flex_scheduling.resources.market.prices import build_price_model, synth_price_history
from flex_scheduling.resources.market.timegrid import TimeGrid
from flex_scheduling.resources.optimize.day_ahead import DaProblem, solve_da
from flex_scheduling.resources.optimize.real_time import ImbalanceRegime
from flex_scheduling.resources.prosumer.pool import FleetSpec, synth_pool
from flex_scheduling.workflow.control_mpc import MpcInputs

EXAMPLE_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), "examples")
START_DATE = "2019-07-01"


# %%
@pytest.fixture(scope="session")
def reference_day():
    """Bundled 100-prosumer reference day (hour, load_kw, pv_kw, da_price)."""
    return pd.read_csv(os.path.join(EXAMPLE_DIR, "reference_day.csv"))


@pytest.fixture(scope="session")
def day_grid():
    return TimeGrid(hours=24, horizon_hours=3)


def scaled_pool(reference_day, n, seed, grid, rt_noise=0.05, fleet_spec=None):
    """Pool of n prosumers around the reference day scaled to n."""
    scale = n / 100
    return synth_pool(
        n,
        reference_day["load_kw"].to_numpy() * scale,
        reference_day["pv_kw"].to_numpy() * scale,
        fleet_spec or FleetSpec(),
        seed=seed,
        grid=grid,
        rt_noise=rt_noise,
    )


def day_inputs(reference_day, grid, pool, price_seed=5, n_days=12, lambda_da=1.0, lambda_rt=1.0, regime=None):
    """Solve DA for a pool on a synthetic market day and return MpcInputs."""
    da_series, rt_series = synth_price_history(
        price_seed, reference_day["da_price"].to_numpy(), n_days, START_DATE
    )
    target = da_series.days()[-1]
    model = build_price_model(da_series, rt_series, target, grid)
    solution = solve_da(DaProblem(model.p_da_hat, lambda_da, model.c_da, pool, grid))
    return MpcInputs(
        grid=grid,
        pool=pool,
        ev_star=solution.ev,
        g_star=solution.g,
        p_rt=rt_series.day_values(target),
        p_rt_hat=model.p_rt_hat,
        p_da=da_series.day_values(target),
        c_rt_template=model.c_rt_template,
        lambda_rt=lambda_rt,
        regime=regime or ImbalanceRegime(),
    )


@pytest.fixture(scope="session")
def small_pool(reference_day, day_grid):
    return scaled_pool(reference_day, 3, seed=1, grid=day_grid)


@pytest.fixture(scope="session")
def small_inputs(reference_day, day_grid, small_pool):
    return day_inputs(reference_day, day_grid, small_pool)


def random_psd(rng, dim, scale=1.0):
    """Random symmetric positive definite matrix."""
    mat = rng.normal(size=(dim, dim))
    return scale * (mat @ mat.T / dim + 0.1 * np.eye(dim))

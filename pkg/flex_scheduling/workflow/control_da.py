"""Control module for day-ahead scheduling.

Builds the DA problem from a pool and price model, solves it, and
writes the schedule with a JSON summary.
"""
# %%
import os
import json
import logging
from flex_scheduling.resources.market.prices import read_price_model
from flex_scheduling.resources.market.timegrid import TimeGrid
from flex_scheduling.resources.optimize.day_ahead import (
    DaProblem,
    solve_da,
    write_da_schedule,
)
from flex_scheduling.resources.prosumer.pool import read_pool_bundle

logger = logging.getLogger(__name__)


# %%
def control_schedule(pool, price_model, grid, lambda_da, settings=None, warm_start=None):
    """Solve the DA schedule for a pool under a price model.

    Parameters
    ----------
    pool : list of Prosumer
    price_model : PriceModel
    grid : TimeGrid
    lambda_da : float
        DA risk aversion
    settings : QpSettings, optional
    warm_start : DaSolution, optional

    Returns
    -------
    DaSolution
    """
    problem = DaProblem(
        p_da=price_model.p_da_hat,
        lambda_da=lambda_da,
        c_da=price_model.c_da,
        pool=pool,
        grid=grid,
    )
    return solve_da(problem, settings, warm_start=warm_start)


def schedule_from_files(pool_dir, price_model_dir, out_dir, lambda_da, settings=None):
    """Read inputs, solve the DA schedule, write outputs.

    Parameters
    ----------
    pool_dir : str
        pool CSV bundle directory
    price_model_dir : str
        directory written by prices.write_price_model
    out_dir : str
        output directory
    lambda_da : float
    settings : QpSettings, optional

    Returns
    -------
    da_data : dict
        mapping of outputs

        da_data keys:

        - [solution] = DaSolution

        - [da-schedule] = path to da_schedule.csv

        - [da-summary] = path to da_summary.json
    """
    pool = read_pool_bundle(pool_dir)
    price_model = read_price_model(price_model_dir)
    hours = len(price_model.p_da_hat)
    horizon = price_model.c_rt_template.shape[0] // 4
    grid = TimeGrid(hours=hours, horizon_hours=horizon)

    solution = control_schedule(pool, price_model, grid, lambda_da, settings)

    if not os.path.exists(out_dir):
        os.makedirs(out_dir)
    da_data = {
        "solution": solution,
        "da-schedule": os.path.join(out_dir, "da_schedule.csv"),
        "da-summary": os.path.join(out_dir, "da_summary.json"),
    }
    write_da_schedule(solution, da_data["da-schedule"])
    with open(da_data["da-summary"], "w") as jfile:
        json.dump(solution.summary(), jfile, indent=2, sort_keys=True)
    logger.info(f"Wrote {da_data['da-schedule']}")
    return da_data

"""Control module for real-time MPC operation of a day.

At every hour the deviation problem is solved over the lookahead
window and only the first hour's four quarter-hour decisions are
implemented. The DA schedule is never re-optimized; implemented
deviations only move the energy already delivered to each EV.
"""
# %%
import os
import copy
import logging
from dataclasses import dataclass, field
import numpy as np
import pandas as pd
from flex_scheduling.resources.market.prices import read_price_csv, read_price_model
from flex_scheduling.resources.market.timegrid import TimeGrid
from flex_scheduling.resources.optimize.day_ahead import read_da_schedule
from flex_scheduling.resources.optimize.qp import QpSettings
from flex_scheduling.resources.optimize.real_time import build_rt_problem, solve_rt_step
from flex_scheduling.resources.prosumer.pool import read_pool_bundle, realize_rt
from flex_scheduling.resources.reports.ledger import build_ledger, write_ledger_json, write_trace

logger = logging.getLogger(__name__)


# %%
class MpcStepError(RuntimeError):
    """An MPC hour failed; carries the hour index."""

    def __init__(self, hour, cause):
        super().__init__(f"ERROR: MPC failed at hour {hour}: {cause}")
        self.hour = hour
        self.cause = cause


@dataclass
class MpcInputs:
    """Everything the RT operator knows or will observe for a day.

    Parameters
    ----------
    grid : TimeGrid
    pool : list of Prosumer
        with RT realizations of load and PV
    ev_star, g_star : numpy.ndarray
        (N, T) DA schedule
    p_rt : numpy.ndarray
        realized RT prices, length 4T
    p_rt_hat : numpy.ndarray
        RT price forecast, length 4T
    p_da : numpy.ndarray
        cleared DA prices, length T
    c_rt_template : numpy.ndarray
        4T_H x 4T_H RT error covariance
    lambda_rt : float
    regime : ImbalanceRegime
    """

    grid: object
    pool: list
    ev_star: np.ndarray
    g_star: np.ndarray
    p_rt: np.ndarray
    p_rt_hat: np.ndarray
    p_da: np.ndarray
    c_rt_template: np.ndarray
    lambda_rt: float
    regime: object


@dataclass
class MpcState:
    """Carried state of the receding horizon after some hours.

    Parameters
    ----------
    next_hour : int
        first hour not yet implemented
    e_past : numpy.ndarray
        (N,) energy delivered to each EV so far, kWh
    dev_ev, dev_g : numpy.ndarray
        (N, 4T) implemented deviations, zero on future slots
    implemented : numpy.ndarray
        (4T,) bool mask of implemented slots
    hour_objectives, hour_risks, hour_iterations : list
        per implemented hour
    last_step : RtStepSolution or None
        previous solution, used to warm start the next hour
    """

    next_hour: int
    e_past: np.ndarray
    dev_ev: np.ndarray
    dev_g: np.ndarray
    implemented: np.ndarray
    hour_objectives: list = field(default_factory=list)
    hour_risks: list = field(default_factory=list)
    hour_iterations: list = field(default_factory=list)
    hour_slack: list = field(default_factory=list)
    last_step: object = None

    @classmethod
    def start(cls, n_pool, grid):
        return cls(
            next_hour=0,
            e_past=np.zeros(n_pool),
            dev_ev=np.zeros((n_pool, grid.rt_len)),
            dev_g=np.zeros((n_pool, grid.rt_len)),
            implemented=np.zeros(grid.rt_len, dtype=bool),
        )

    @property
    def dg_total(self):
        return self.dev_g.sum(axis=0)

    @property
    def dev_total(self):
        return self.dev_ev.sum(axis=0)


# %%
def run_mpc(inputs, settings=None, warm_start=True, start_hour=0, state=None, stop_hour=None):
    """Run the receding-horizon operator over a day.

    Parameters
    ----------
    inputs : MpcInputs
    settings : QpSettings, optional
    warm_start : bool
        seed each hour's solver with the previous hour's solution
    start_hour : int
        first hour to run; requires state when > 0
    state : MpcState, optional
        state after start_hour - 1, not modified
    stop_hour : int, optional
        stop before this hour, defaults to the end of the day

    Returns
    -------
    MpcState
        state after the last implemented hour

    Raises
    ------
    MpcStepError
        wrapping any step failure with its hour
    """
    grid = inputs.grid
    settings = settings or QpSettings()
    stop_hour = grid.hours if stop_hour is None else stop_hour
    if state is None:
        if start_hour != 0:
            raise ValueError("ERROR: resuming after hour 0 requires an MpcState")
        state = MpcState.start(len(inputs.pool), grid)
    else:
        state = copy.deepcopy(state)
        if state.next_hour != start_hour:
            raise ValueError(
                f"ERROR: state resumes at hour {state.next_hour}, not {start_hour}"
            )

    dt = grid.dt_rt
    etas = np.array([p.eta for p in inputs.pool])
    ev_star_up = np.vstack([grid.upsample_hourly(row) for row in inputs.ev_star])

    for hour in range(start_hour, stop_hour):
        logger.info(f"MPC hour {hour + 1}/{grid.hours} ...")
        try:
            problem = build_rt_problem(
                hour,
                grid,
                inputs.pool,
                inputs.ev_star,
                inputs.g_star,
                state.e_past,
                inputs.p_rt,
                inputs.p_rt_hat,
                inputs.p_da,
                inputs.lambda_rt,
                inputs.c_rt_template,
                inputs.regime,
            )
            step = solve_rt_step(
                problem, settings, warm_start=state.last_step if warm_start else None
            )
        except Exception as err:
            raise MpcStepError(hour, err) from err

        quarters = grid.hour_to_quarters(hour)
        sel = slice(quarters.start, quarters.stop)
        state.dev_ev[:, sel] = step.dev_ev[:, step.implemented]
        state.dev_g[:, sel] = step.dev_g[:, step.implemented]
        state.implemented[sel] = True
        state.e_past = state.e_past + etas * dt * (
            ev_star_up[:, sel] + state.dev_ev[:, sel]
        ).sum(axis=1)
        state.hour_objectives.append(step.objective)
        state.hour_risks.append(step.risk_term)
        state.hour_iterations.append(step.iterations)
        state.hour_slack.append(step.slack_kwh)
        state.last_step = step
        state.next_hour = hour + 1
    return state


# %%
def trace_frame(inputs, state):
    """Aggregate per-slot trace of an MPC run.

    Returns
    -------
    pandas.DataFrame
        columns slot, hour, dg_kw, dev_kw, p_rt, p_da, implemented
    """
    grid = inputs.grid
    slots = np.arange(grid.rt_len)
    return pd.DataFrame(
        {
            "slot": slots,
            "hour": [grid.slot_to_hour(slot) for slot in slots],
            "dg_kw": state.dg_total,
            "dev_kw": state.dev_total,
            "p_rt": np.asarray(inputs.p_rt, dtype=float),
            "p_da": grid.upsample_hourly(inputs.p_da),
            "implemented": state.implemented,
        }
    )


def prosumer_trace_frame(inputs, state):
    """Per-prosumer implemented deviations (prosumer, slot, dg_kw, dev_kw)."""
    n_pool, rt_len = state.dev_g.shape
    return pd.DataFrame(
        {
            "prosumer": np.repeat([p.id for p in inputs.pool], rt_len),
            "slot": np.tile(np.arange(rt_len), n_pool),
            "dg_kw": state.dev_g.ravel(),
            "dev_kw": state.dev_ev.ravel(),
        }
    )


# %%
def operate_from_files(
    schedule_csv,
    pool_dir,
    rt_price_csv,
    da_price_csv,
    price_model_dir,
    out_dir,
    lambda_rt,
    horizon_hours,
    regime,
    settings=None,
    seed=None,
    rt_noise=None,
):
    """Read a DA schedule and market data, run the MPC day, write outputs.

    The operated day is the last full day of the cleared DA price CSV.
    When seed and rt_noise are both given, RT realizations of load and
    PV are redrawn instead of taken from the pool bundle.

    Parameters
    ----------
    schedule_csv : str
        da_schedule.csv written by the DA step
    pool_dir : str
        pool CSV bundle directory
    rt_price_csv, da_price_csv : str
        realized RT and cleared DA prices, `timestamp,price`
    price_model_dir : str
        forecasts and covariances (prices.write_price_model)
    out_dir : str
    lambda_rt : float
    horizon_hours : int or None
        MPC lookahead; None takes the horizon the price model was
        built for, larger values are rejected
    regime : ImbalanceRegime
    settings : QpSettings, optional
    seed : int, optional
    rt_noise : float, optional

    Returns
    -------
    rt_data : dict
        mapping of outputs

        rt_data keys:

        - [state] = final MpcState

        - [ledger] = CostLedger

        - [rt-trace] = path to rt_trace.csv

        - [rt-prosumer-trace] = path to rt_prosumer_trace.csv

        - [ledger-json] = path to ledger.json
    """
    pool = read_pool_bundle(pool_dir)
    price_model = read_price_model(price_model_dir)
    model_horizon = price_model.c_rt_template.shape[0] // 4
    if horizon_hours is None:
        horizon_hours = model_horizon
    elif horizon_hours > model_horizon:
        raise ValueError(
            f"ERROR: horizon of {horizon_hours} h exceeds the {model_horizon} h "
            f"covered by the price model in {price_model_dir}"
        )
    grid = TimeGrid(hours=len(price_model.p_da_hat), horizon_hours=horizon_hours)
    if seed is not None and rt_noise is not None:
        pool = realize_rt(pool, grid, rt_noise, seed)
    ev_star, g_star = read_da_schedule(schedule_csv, pool)

    da_series = read_price_csv(da_price_csv, "hourly")
    rt_series = read_price_csv(rt_price_csv, "quarter-hourly")
    day = da_series.days()[-1]
    logger.info(f"Operating {day} for {len(pool)} prosumers")

    inputs = MpcInputs(
        grid=grid,
        pool=pool,
        ev_star=ev_star,
        g_star=g_star,
        p_rt=rt_series.day_values(day),
        p_rt_hat=price_model.p_rt_hat,
        p_da=da_series.day_values(day),
        c_rt_template=price_model.c_rt_template,
        lambda_rt=lambda_rt,
        regime=regime,
    )
    state = run_mpc(inputs, settings)
    trace = trace_frame(inputs, state)
    ledger = build_ledger(
        g_star.sum(axis=0),
        price_model.p_da_hat,
        inputs.p_da,
        trace,
        regime,
        risk_terms={"rt": list(state.hour_risks)},
    )

    if not os.path.exists(out_dir):
        os.makedirs(out_dir)
    rt_data = {
        "state": state,
        "ledger": ledger,
        "rt-trace": os.path.join(out_dir, "rt_trace.csv"),
        "rt-prosumer-trace": os.path.join(out_dir, "rt_prosumer_trace.csv"),
        "ledger-json": os.path.join(out_dir, "ledger.json"),
    }
    write_trace(trace, rt_data["rt-trace"])
    prosumer_trace_frame(inputs, state).to_csv(
        rt_data["rt-prosumer-trace"], index=False, float_format="%.9f"
    )
    write_ledger_json(ledger, rt_data["ledger-json"])
    return rt_data

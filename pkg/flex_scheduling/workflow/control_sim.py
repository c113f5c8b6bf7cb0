"""Control module for a full single-day experiment.

Runs pool generation, price modelling, DA scheduling, MPC operation
and settlement under one seeded configuration, then writes the
experiment directory:

    <out_dir>/
        da_schedule.csv
        rt_trace.csv
        rt_prosumer_trace.csv
        ledger.json
        meta.json
        plots/aggregate.csv
        plots/prices.csv
        inputs/pool/*.csv
        inputs/price_model/*.csv
        inputs/da_prices.csv
        inputs/rt_prices.csv

Seeds: pool_seed draws pool heterogeneity and EV plug windows,
price_seed the price history and the operated day's prices, and seed
the RT realizations of load and PV. Changing only seed leaves the DA
schedule unchanged.
"""
# %%
import os
import json
import time
import hashlib
import logging
import configparser
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields, replace
from datetime import timedelta
import numpy as np
import pandas as pd
from flex_scheduling import __version__
from flex_scheduling.resources.market.prices import (
    build_price_model,
    parse_day,
    read_price_csv,
    synth_price_history,
    write_price_csv,
    write_price_model,
)
from flex_scheduling.resources.market.timegrid import TimeGrid
from flex_scheduling.resources.optimize.day_ahead import write_da_schedule
from flex_scheduling.resources.optimize.qp import QpSettings
from flex_scheduling.resources.optimize.real_time import ImbalanceRegime
from flex_scheduling.resources.prosumer.constraints import check_day_feasibility
from flex_scheduling.resources.prosumer.pool import (
    FleetSpec,
    realize_rt,
    synth_pool,
    write_pool_bundle,
)
from flex_scheduling.resources.reports.ledger import (
    build_ledger,
    write_ledger_json,
    write_plot_series,
    write_trace,
)
from flex_scheduling.workflow.control_da import control_schedule
from flex_scheduling.workflow.control_mpc import (
    MpcInputs,
    prosumer_trace_frame,
    run_mpc,
    trace_frame,
)

logger = logging.getLogger(__name__)

REFERENCE_DAY = os.path.join(
    os.path.dirname(os.path.dirname(__file__)), "examples", "reference_day.csv"
)
REFERENCE_PROSUMERS = 100


# %%
class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"ERROR: stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name):
    """Annotate any failure inside the block with the stage name."""
    logger.info(f"Stage: {name}")
    try:
        yield
    except StageError:
        raise
    except Exception as err:
        raise StageError(name, err) from err


@dataclass(frozen=True)
class ExperimentConfig:
    """One seeded single-day experiment.

    Defaults reproduce the reference parameter set: 100 prosumers,
    3 hour lookahead, 10 kW grid limit, 90% charging efficiency, no
    imbalance prices, unit risk aversion.
    """

    n_prosumers: int = 100
    hours: int = 24
    horizon_hours: int = 3
    lambda_da: float = 1.0
    lambda_rt: float = 1.0
    delta_plus: float = 0.0
    delta_minus: float = 0.0
    regime: str = "caiso"
    seed: int = 0
    pool_seed: int = -1
    price_seed: int = -1
    load_noise: float = 0.2
    pv_noise: float = 0.2
    rt_noise: float = 0.05
    g_lo: float = -10.0
    g_hi: float = 10.0
    eta: float = 0.9
    ev_share: float = 1.0
    ev_power_kw: float = 6.6
    history_days: int = 28
    forecast_k: int = 4
    spike_prob: float = 0.02
    start_date: str = "2019-07-01"
    profile_path: str = ""
    da_price_path: str = ""
    rt_price_path: str = ""
    eps_abs: float = 1e-8
    eps_rel: float = 1e-6
    max_iter: int = 50000
    warm_start: bool = True

    def __post_init__(self):
        if self.hours != 24:
            raise ValueError(f"ERROR: experiments cover one 24 hour day, got {self.hours}")
        if self.n_prosumers < 1:
            raise ValueError(f"ERROR: n_prosumers must be >= 1, got {self.n_prosumers}")
        if self.history_days < 9:
            raise ValueError(
                f"ERROR: history_days must be >= 9 for two error samples, got {self.history_days}"
            )
        if bool(self.da_price_path) != bool(self.rt_price_path):
            raise ValueError("ERROR: da_price_path and rt_price_path go together")
        self.regime_obj()
        self.grid()

    def resolved_pool_seed(self):
        return self.seed if self.pool_seed < 0 else self.pool_seed

    def resolved_price_seed(self):
        return self.seed if self.price_seed < 0 else self.price_seed

    def grid(self):
        return TimeGrid(hours=self.hours, horizon_hours=self.horizon_hours)

    def regime_obj(self):
        return ImbalanceRegime(self.delta_plus, self.delta_minus, self.regime)

    def qp_settings(self):
        return QpSettings(eps_abs=self.eps_abs, eps_rel=self.eps_rel, max_iter=self.max_iter)

    def digest(self):
        """sha256 of the canonical JSON form of the configuration."""
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _coerce(value, kind):
    if kind is bool:
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    return kind(value)


def load_config(config_path=None, overrides=None):
    """Build an ExperimentConfig from an INI file and overrides.

    The file holds `key = value` lines in an [experiment] section.
    Overrides with value None are ignored.

    Parameters
    ----------
    config_path : str, optional
    overrides : dict, optional

    Returns
    -------
    ExperimentConfig
    """
    kinds = {f.name: type(f.default) for f in fields(ExperimentConfig)}
    values = {}
    if config_path:
        if not os.path.exists(config_path):
            raise FileNotFoundError(f"ERROR: config {config_path} not found")
        parser = configparser.ConfigParser()
        parser.read(config_path)
        if not parser.has_section("experiment"):
            raise ValueError(f"ERROR: {config_path} has no [experiment] section")
        for key, value in parser.items("experiment"):
            if key not in kinds:
                raise ValueError(f"ERROR: unknown config key '{key}'")
            values[key] = _coerce(value, kinds[key])
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in kinds:
            raise ValueError(f"ERROR: unknown config key '{key}'")
        values[key] = _coerce(value, kinds[key])
    return ExperimentConfig(**values)


# %%
def _reference_profiles(config):
    path = config.profile_path or REFERENCE_DAY
    df = pd.read_csv(path)
    missing = {"load_kw", "pv_kw", "da_price"} - set(df.columns)
    if missing:
        raise ValueError(f"ERROR: profile {path} missing columns {sorted(missing)}")
    scale = config.n_prosumers / REFERENCE_PROSUMERS
    return (
        df["load_kw"].to_numpy(float) * scale,
        df["pv_kw"].to_numpy(float) * scale,
        df["da_price"].to_numpy(float),
    )


def _market_data(config, base_da):
    """Price histories before the operated day, and the day itself."""
    if config.da_price_path:
        da_series = read_price_csv(config.da_price_path, "hourly")
        rt_series = read_price_csv(config.rt_price_path, "quarter-hourly")
        target_day = da_series.days()[-1]
    else:
        da_series, rt_series = synth_price_history(
            config.resolved_price_seed(),
            base_da,
            config.history_days + 1,
            config.start_date,
            spike_prob=config.spike_prob,
        )
        target_day = parse_day(config.start_date) + timedelta(days=config.history_days)
    return da_series, rt_series, target_day


def simulate(config, out_dir=None):
    """Run a single-day experiment end to end.

    Parameters
    ----------
    config : ExperimentConfig
    out_dir : str, optional
        write the experiment directory here when given

    Returns
    -------
    sim_data : dict
        experiment bundle

        sim_data keys:

        - [config] = ExperimentConfig

        - [pool] = list of Prosumer (with RT realizations)

        - [price-model] = PriceModel

        - [p-da], [p-rt] = cleared DA and realized RT prices of the day

        - [da-solution] = DaSolution

        - [mpc-inputs] = MpcInputs

        - [mpc-state] = final MpcState

        - [trace] = aggregate RT trace DataFrame

        - [ledger] = CostLedger

        - [feasibility] = largest violation per constraint family

        - [meta] = metadata dict

        - [files] = written paths, when out_dir is given
    """
    started = time.perf_counter()
    grid = config.grid()
    settings = config.qp_settings()
    regime = config.regime_obj()
    sim_data = {"config": config}

    with stage("pool"):
        load, pv, base_da = _reference_profiles(config)
        fleet = FleetSpec(ev_share=config.ev_share, power_kw=config.ev_power_kw)
        pool = synth_pool(
            config.n_prosumers,
            load,
            pv,
            fleet,
            seed=config.resolved_pool_seed(),
            grid=grid,
            load_noise=config.load_noise,
            pv_noise=config.pv_noise,
            rt_noise=0.0,
            g_lo=config.g_lo,
            g_hi=config.g_hi,
            eta=config.eta,
        )
        pool = realize_rt(pool, grid, config.rt_noise, config.seed)
        sim_data["pool"] = pool

    with stage("prices"):
        da_series, rt_series, target_day = _market_data(config, base_da)
        price_model = build_price_model(
            da_series, rt_series, target_day, grid, k=config.forecast_k
        )
        sim_data["price-model"] = price_model
        sim_data["p-da"] = da_series.day_values(target_day)
        sim_data["p-rt"] = rt_series.day_values(target_day)

    with stage("day_ahead"):
        da_solution = control_schedule(pool, price_model, grid, config.lambda_da, settings)
        sim_data["da-solution"] = da_solution

    with stage("real_time"):
        inputs = MpcInputs(
            grid=grid,
            pool=pool,
            ev_star=da_solution.ev,
            g_star=da_solution.g,
            p_rt=sim_data["p-rt"],
            p_rt_hat=price_model.p_rt_hat,
            p_da=sim_data["p-da"],
            c_rt_template=price_model.c_rt_template,
            lambda_rt=config.lambda_rt,
            regime=regime,
        )
        state = run_mpc(inputs, settings, warm_start=config.warm_start)
        sim_data["mpc-inputs"] = inputs
        sim_data["mpc-state"] = state

    with stage("settle"):
        trace = trace_frame(inputs, state)
        ledger = build_ledger(
            da_solution.g_total,
            price_model.p_da_hat,
            sim_data["p-da"],
            trace,
            regime,
            risk_terms={"da": da_solution.risk_term, "rt": list(state.hour_risks)},
        )
        feasibility = pool_feasibility(pool, grid, da_solution, state)
        sim_data["trace"] = trace
        sim_data["ledger"] = ledger
        sim_data["feasibility"] = feasibility

    sim_data["meta"] = {
        "config": asdict(config),
        "config_hash": config.digest(),
        "version": __version__,
        "target_day": str(target_day),
        "wall_time_s": round(time.perf_counter() - started, 3),
        "da_iterations": da_solution.iterations,
        "rt_iterations": list(state.hour_iterations),
        "rt_slack_kwh": list(state.hour_slack),
        "feasibility": feasibility,
    }
    logger.info(
        f"Experiment done: total cost {ledger.total_cost:.4f} $, "
        f"RT supplementary {ledger.rt_supplementary:.4f} $"
    )

    if out_dir:
        with stage("write"):
            sim_data["files"] = write_experiment(sim_data, da_series, rt_series, out_dir)
    return sim_data


def pool_feasibility(pool, grid, da_solution, state):
    """Largest violation per constraint family across the pool."""
    worst = {}
    for num, prosumer in enumerate(pool):
        report = check_day_feasibility(
            prosumer,
            grid,
            da_solution.ev[num],
            da_solution.g[num],
            state.dev_ev[num],
            state.dev_g[num],
        )
        for key, value in report.items():
            worst[key] = max(worst.get(key, 0.0), value)
    return worst


def write_experiment(sim_data, da_series, rt_series, out_dir):
    """Write the experiment directory, return paths by key."""
    input_dir = os.path.join(out_dir, "inputs")
    for h_dir in [out_dir, input_dir]:
        if not os.path.exists(h_dir):
            os.makedirs(h_dir)
    files = {
        "da-schedule": os.path.join(out_dir, "da_schedule.csv"),
        "rt-trace": os.path.join(out_dir, "rt_trace.csv"),
        "rt-prosumer-trace": os.path.join(out_dir, "rt_prosumer_trace.csv"),
        "ledger": os.path.join(out_dir, "ledger.json"),
        "meta": os.path.join(out_dir, "meta.json"),
        "da-prices": os.path.join(input_dir, "da_prices.csv"),
        "rt-prices": os.path.join(input_dir, "rt_prices.csv"),
    }
    da_solution = sim_data["da-solution"]
    grid = sim_data["mpc-inputs"].grid

    write_da_schedule(da_solution, files["da-schedule"])
    write_trace(sim_data["trace"], files["rt-trace"])
    prosumer_trace_frame(sim_data["mpc-inputs"], sim_data["mpc-state"]).to_csv(
        files["rt-prosumer-trace"], index=False, float_format="%.9f"
    )
    write_ledger_json(sim_data["ledger"], files["ledger"])
    with open(files["meta"], "w") as jfile:
        json.dump(sim_data["meta"], jfile, indent=2, sort_keys=True)
    files.update(
        write_plot_series(
            grid,
            da_solution.g_total,
            da_solution.ev_total,
            sim_data["trace"],
            os.path.join(out_dir, "plots"),
        )
    )
    files["pool"] = write_pool_bundle(sim_data["pool"], os.path.join(input_dir, "pool"))
    files["price-model"] = write_price_model(
        sim_data["price-model"], os.path.join(input_dir, "price_model")
    )
    write_price_csv(da_series, files["da-prices"])
    write_price_csv(rt_series, files["rt-prices"])
    logger.info(f"Wrote experiment to {out_dir}")
    return files


def sweep(config, field_name, values, out_root=None):
    """Run the same experiment for several values of one config field.

    Returns
    -------
    dict
        value -> CostLedger
    """
    ledgers = {}
    for value in values:
        run_config = replace(config, **{field_name: value})
        out_dir = os.path.join(out_root, f"{field_name}-{value}") if out_root else None
        ledgers[value] = simulate(run_config, out_dir)["ledger"]
    return ledgers

"""Cost accounting for a simulated day.

Sign convention: positive amounts are paid by the aggregator,
negative amounts are received. DA costs price the hourly aggregate
schedule, RT costs price the implemented quarter-hourly deviations.
"""

# %%
import os
import json
from dataclasses import dataclass, field
import numpy as np
import pandas as pd
from ..market.prices import MWH_PER_KWH
from ..optimize.real_time import ImbalanceBreakdown, imbalance_cost

TRACE_COLUMNS = ["slot", "hour", "dg_kw", "dev_kw", "p_rt", "p_da", "implemented"]


# %%
@dataclass
class CostLedger:
    """Day-level cost summary, $.

    Parameters
    ----------
    predicted_da_cost : float
        forecast DA price times DA schedule
    cleared_da_cost : float
        cleared DA price times DA schedule
    rt_supplementary : float
        RT price times implemented deviations
    imbalance : ImbalanceBreakdown
        imbalance charges over implemented slots
    da_energy_mwh : float
        scheduled DA energy, used for average prices
    risk_terms : dict
        "da" risk term and "rt" list of per-hour window risk terms
    """

    predicted_da_cost: float
    cleared_da_cost: float
    rt_supplementary: float
    imbalance: ImbalanceBreakdown
    da_energy_mwh: float
    risk_terms: dict = field(default_factory=dict)

    @property
    def imbalance_total(self):
        return self.imbalance.total

    @property
    def total_cost(self):
        return self.cleared_da_cost + self.rt_supplementary + self.imbalance_total

    def average_price(self, cost):
        """Cost per scheduled MWh, NaN for an empty schedule."""
        if abs(self.da_energy_mwh) < 1e-12:
            return float("nan")
        return cost / self.da_energy_mwh

    def as_dict(self):
        return {
            "predicted_da_cost": self.predicted_da_cost,
            "cleared_da_cost": self.cleared_da_cost,
            "rt_supplementary": self.rt_supplementary,
            "imbalance_total": self.imbalance_total,
            "imbalance": self.imbalance.as_dict(),
            "total_cost": self.total_cost,
            "da_energy_mwh": self.da_energy_mwh,
            "predicted_avg_price": self.average_price(self.predicted_da_cost),
            "cleared_avg_price": self.average_price(self.cleared_da_cost),
            "risk_terms": self.risk_terms,
        }


# %%
def settle_da(g_total, predicted_prices, cleared_prices, dt=1.0):
    """Predicted and cleared cost of an hourly aggregate schedule.

    Parameters
    ----------
    g_total : array-like
        aggregate DA grid import, kW, length T
    predicted_prices, cleared_prices : array-like
        $/MWh, length T
    dt : float
        slot length, hours

    Returns
    -------
    predicted, cleared : float
        costs in $
    """
    g_total = np.asarray(g_total, dtype=float)
    predicted_prices = np.asarray(predicted_prices, dtype=float)
    cleared_prices = np.asarray(cleared_prices, dtype=float)
    if not g_total.shape == predicted_prices.shape == cleared_prices.shape:
        raise ValueError(
            f"ERROR: length mismatch schedule {g_total.shape}, predicted "
            f"{predicted_prices.shape}, cleared {cleared_prices.shape}"
        )
    energy = g_total * dt * MWH_PER_KWH
    return float(predicted_prices @ energy), float(cleared_prices @ energy)


def settle_rt(trace, regime, dt=0.25):
    """RT supplementary cost and imbalance charges of implemented slots.

    Parameters
    ----------
    trace : pandas.DataFrame
        columns of TRACE_COLUMNS; only rows with implemented True count
    regime : ImbalanceRegime
    dt : float

    Returns
    -------
    rt_supplementary : float
    imbalance : ImbalanceBreakdown
    """
    if "implemented" not in trace.columns:
        raise ValueError("ERROR: trace has no implemented column")
    done = trace[trace["implemented"].astype(bool)]
    dg = done["dg_kw"].to_numpy(float)
    p_rt = done["p_rt"].to_numpy(float)
    rt_supplementary = float(p_rt @ (dg * dt * MWH_PER_KWH))
    _, breakdown = imbalance_cost(dg, p_rt, done["p_da"].to_numpy(float), regime, dt)
    return rt_supplementary, breakdown


def build_ledger(g_total, p_da_hat, p_da, trace, regime, risk_terms=None, dt_da=1.0, dt_rt=0.25):
    """Fold a DA schedule and RT trace into a CostLedger."""
    predicted, cleared = settle_da(g_total, p_da_hat, p_da, dt_da)
    rt_supplementary, breakdown = settle_rt(trace, regime, dt_rt)
    return CostLedger(
        predicted_da_cost=predicted,
        cleared_da_cost=cleared,
        rt_supplementary=rt_supplementary,
        imbalance=breakdown,
        da_energy_mwh=float(np.sum(g_total) * dt_da * MWH_PER_KWH),
        risk_terms=risk_terms or {},
    )


# %%
def write_trace(trace, csv_path):
    """Write an aggregate RT trace with fixed float formatting."""
    trace[TRACE_COLUMNS].to_csv(csv_path, index=False, float_format="%.9f")


def read_trace(csv_path):
    df = pd.read_csv(csv_path)
    missing = set(TRACE_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"ERROR: trace {csv_path} missing columns {sorted(missing)}")
    df["implemented"] = df["implemented"].astype(bool)
    return df


def write_ledger_json(ledger, json_path):
    with open(json_path, "w") as jfile:
        json.dump(ledger.as_dict(), jfile, indent=2, sort_keys=True)


def write_plot_series(grid, g_total, ev_total, trace, plot_dir):
    """Write plot-ready per-slot series of DA schedule and RT deviations.

    Returns
    -------
    dict
        paths keyed by [aggregate] and [prices]
    """
    if not os.path.exists(plot_dir):
        os.makedirs(plot_dir)
    out_files = {
        "aggregate": os.path.join(plot_dir, "aggregate.csv"),
        "prices": os.path.join(plot_dir, "prices.csv"),
    }
    trace = trace.sort_values("slot")
    pd.DataFrame(
        {
            "slot": trace["slot"].to_numpy(),
            "g_kw": grid.upsample_hourly(g_total),
            "dg_kw": trace["dg_kw"].to_numpy(),
            "ev_kw": grid.upsample_hourly(ev_total),
            "dev_kw": trace["dev_kw"].to_numpy(),
        }
    ).to_csv(out_files["aggregate"], index=False, float_format="%.9f")
    trace[["slot", "p_da", "p_rt"]].to_csv(
        out_files["prices"], index=False, float_format="%.6f"
    )
    return out_files

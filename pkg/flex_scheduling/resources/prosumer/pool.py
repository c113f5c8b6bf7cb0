"""Prosumer data model, synthetic pool generation, CSV bundle I/O.

Each prosumer carries its load and PV at DA (hourly) and RT
(quarter-hourly) resolution, grid import limits, and EV charging
bounds. EV energy bounds are on cumulative energy delivered to the
battery since the start of the day, in kWh.
"""

# %%
import os
import logging
from dataclasses import dataclass, replace
import numpy as np
import pandas as pd
from ..market.timegrid import TimeGrid

logger = logging.getLogger(__name__)

BUNDLE_FILES = {
    "prosumers": "prosumers.csv",
    "profiles-da": "profiles_da.csv",
    "profiles-rt": "profiles_rt.csv",
    "ev-windows": "ev_windows.csv",
}


# %%
@dataclass(frozen=True)
class Prosumer:
    """One prosumer's profiles and limits.

    Power in kW, energy in kWh. Arrays suffixed _da have length T,
    arrays suffixed _rt have length 4T.

    Parameters
    ----------
    id : str
        prosumer identifier
    load_da, pv_da : numpy.ndarray
        DA load and PV profiles (forecast)
    load_rt, pv_rt : numpy.ndarray
        RT realization of load and PV
    ev_lo_da, ev_hi_da, ev_lo_rt, ev_hi_rt : numpy.ndarray
        EV charging power bounds, zero while unplugged
    cum_lo_da, cum_hi_da, cum_lo_rt, cum_hi_rt : numpy.ndarray
        cumulative delivered-energy bounds at the end of each slot
    g_lo, g_hi : float
        grid import bounds
    eta : float
        charging efficiency, applied to energy accumulation only
    """

    id: str
    load_da: np.ndarray
    pv_da: np.ndarray
    load_rt: np.ndarray
    pv_rt: np.ndarray
    ev_lo_da: np.ndarray
    ev_hi_da: np.ndarray
    ev_lo_rt: np.ndarray
    ev_hi_rt: np.ndarray
    cum_lo_da: np.ndarray
    cum_hi_da: np.ndarray
    cum_lo_rt: np.ndarray
    cum_hi_rt: np.ndarray
    g_lo: float = -10.0
    g_hi: float = 10.0
    eta: float = 0.9

    def __post_init__(self):
        hours = len(self.load_da)
        for name in ("pv_da", "ev_lo_da", "ev_hi_da", "cum_lo_da", "cum_hi_da"):
            if len(getattr(self, name)) != hours:
                raise ValueError(f"ERROR: {self.id}: {name} length != {hours}")
        for name in ("load_rt", "pv_rt", "ev_lo_rt", "ev_hi_rt", "cum_lo_rt", "cum_hi_rt"):
            if len(getattr(self, name)) != 4 * hours:
                raise ValueError(f"ERROR: {self.id}: {name} length != {4 * hours}")
        if self.g_lo > self.g_hi:
            raise ValueError(f"ERROR: {self.id}: g_lo {self.g_lo} > g_hi {self.g_hi}")
        if not 0 < self.eta <= 1:
            raise ValueError(f"ERROR: {self.id}: eta must lie in (0, 1], got {self.eta}")
        for res in ("da", "rt"):
            lo = getattr(self, f"ev_lo_{res}")
            hi = getattr(self, f"ev_hi_{res}")
            if np.any(lo > hi):
                raise ValueError(f"ERROR: {self.id}: EV power lo > hi ({res})")
            if np.any(getattr(self, f"cum_lo_{res}") > getattr(self, f"cum_hi_{res}") + 1e-12):
                raise ValueError(f"ERROR: {self.id}: EV energy lo > hi ({res})")

    @property
    def hours(self):
        return len(self.load_da)

    @property
    def has_ev(self):
        return bool(np.any(self.ev_hi_da != 0) or np.any(self.ev_lo_da != 0))

    def plugged_rt(self):
        """Boolean mask of RT slots where the EV may draw or inject power."""
        return (self.ev_lo_rt != 0) | (self.ev_hi_rt != 0)


@dataclass(frozen=True)
class FleetSpec:
    """Distribution of EV plug windows and energy needs.

    Parameters
    ----------
    ev_share : float
        fraction of prosumers owning an EV
    power_kw : float
        charger rating (upper power bound while plugged)
    min_power_kw : float
        lower power bound while plugged (negative allows V2G)
    arrival_hours : tuple of int
        inclusive range of plug-in hours
    dwell_hours : tuple of int
        inclusive range of plugged duration, truncated at day end
    energy_kwh : tuple of float
        range of energy to deliver before departure
    """

    ev_share: float = 1.0
    power_kw: float = 6.6
    min_power_kw: float = 0.0
    arrival_hours: tuple = (7, 19)
    dwell_hours: tuple = (3, 10)
    energy_kwh: tuple = (4.0, 16.0)


# %%
def interpolate_cumulative(cum_da):
    """Quarter-hourly cumulative bounds, linear within each hour."""
    cum_da = np.asarray(cum_da, dtype=float)
    prev = np.concatenate([[0.0], cum_da[:-1]])
    frac = np.arange(1, 5) / 4.0
    return (prev[:, None] + frac[None, :] * (cum_da - prev)[:, None]).ravel()


def ev_bounds(plugged, energy_kwh, power_kw, eta, min_power_kw=0.0):
    """Power and cumulative-energy bounds for one hourly plug pattern.

    The upper energy bound follows charging as early as possible, the
    lower bound charging as late as possible, both capped at the
    energy need, so every path between them is reachable.

    Parameters
    ----------
    plugged : numpy.ndarray of bool
        hourly plug status
    energy_kwh : float
        energy to deliver by departure
    power_kw : float
        charger rating
    eta : float
        charging efficiency

    Returns
    -------
    dict
        keys ev_lo_da, ev_hi_da, cum_lo_da, cum_hi_da
    """
    plugged = np.asarray(plugged, dtype=bool)
    per_hour = eta * power_kw * plugged
    delivered_by = np.cumsum(per_hour)
    remaining_after = per_hour.sum() - delivered_by
    energy_kwh = min(energy_kwh, per_hour.sum())
    return {
        "ev_lo_da": np.where(plugged, min_power_kw, 0.0),
        "ev_hi_da": np.where(plugged, power_kw, 0.0),
        "cum_lo_da": np.maximum(0.0, energy_kwh - remaining_after),
        "cum_hi_da": np.minimum(energy_kwh, delivered_by),
    }


def make_prosumer(pid, load_da, pv_da, ev, grid, g_lo=-10.0, g_hi=10.0, eta=0.9, load_rt=None, pv_rt=None):
    """Assemble a Prosumer, deriving RT arrays from the DA ones.

    RT realizations default to the DA profiles held over each hour.
    EV power bounds are upsampled and energy bounds interpolated.
    """
    ev = ev or {
        key: np.zeros(grid.hours) for key in ("ev_lo_da", "ev_hi_da", "cum_lo_da", "cum_hi_da")
    }
    load_da = np.asarray(load_da, dtype=float)
    pv_da = np.asarray(pv_da, dtype=float)
    return Prosumer(
        id=str(pid),
        load_da=load_da,
        pv_da=pv_da,
        load_rt=grid.upsample_hourly(load_da) if load_rt is None else np.asarray(load_rt, float),
        pv_rt=grid.upsample_hourly(pv_da) if pv_rt is None else np.asarray(pv_rt, float),
        ev_lo_da=np.asarray(ev["ev_lo_da"], float),
        ev_hi_da=np.asarray(ev["ev_hi_da"], float),
        ev_lo_rt=grid.upsample_hourly(ev["ev_lo_da"]),
        ev_hi_rt=grid.upsample_hourly(ev["ev_hi_da"]),
        cum_lo_da=np.asarray(ev["cum_lo_da"], float),
        cum_hi_da=np.asarray(ev["cum_hi_da"], float),
        cum_lo_rt=interpolate_cumulative(ev["cum_lo_da"]),
        cum_hi_rt=interpolate_cumulative(ev["cum_hi_da"]),
        g_lo=float(g_lo),
        g_hi=float(g_hi),
        eta=float(eta),
    )


def realize_rt(pool, grid, noise, seed):
    """Draw RT realizations of load and PV around the DA profiles.

    Each quarter-hour value is the DA value times (1 + e), with
    e ~ N(0, noise), floored at zero. noise = 0 reproduces the DA
    profiles exactly.

    Parameters
    ----------
    pool : list of Prosumer
    grid : TimeGrid
    noise : float
        relative standard deviation of the quarter-hourly noise
    seed : int

    Returns
    -------
    list of Prosumer
        copies with load_rt and pv_rt replaced
    """
    if noise < 0:
        raise ValueError(f"ERROR: RT noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    realized = []
    for prosumer in pool:
        load_up = grid.upsample_hourly(prosumer.load_da)
        pv_up = grid.upsample_hourly(prosumer.pv_da)
        load_rt = np.maximum(0.0, load_up * (1.0 + rng.normal(0.0, noise, load_up.size)))
        pv_rt = np.maximum(0.0, pv_up * (1.0 + rng.normal(0.0, noise, pv_up.size)))
        realized.append(replace(prosumer, load_rt=load_rt, pv_rt=pv_rt))
    return realized


def synth_pool(
    n,
    aggregate_load,
    pv_profile,
    fleet_spec=None,
    seed=0,
    grid=None,
    load_noise=0.2,
    pv_noise=0.2,
    rt_noise=0.05,
    g_lo=-10.0,
    g_hi=10.0,
    eta=0.9,
):
    """Generate a heterogeneous prosumer pool around aggregate profiles.

    Prosumer i gets load (aggregate / n) * (1 + u_i) with one u_i per
    prosumer, uniform in [-load_noise, load_noise], PV likewise, an EV plug
    window drawn from fleet_spec, and RT realizations with relative
    noise rt_noise.

    Parameters
    ----------
    n : int
        number of prosumers
    aggregate_load, pv_profile : array-like
        hourly pool-level load and PV, kW, length T
    fleet_spec : FleetSpec, optional
    seed : int
        seed for every draw, the pool is identical for identical seeds
    grid : TimeGrid, optional
        defaults to TimeGrid(hours=len(aggregate_load))

    Returns
    -------
    list of Prosumer
    """
    if n < 1:
        raise ValueError(f"ERROR: pool size must be >= 1, got {n}")
    aggregate_load = np.asarray(aggregate_load, dtype=float)
    pv_profile = np.asarray(pv_profile, dtype=float)
    if np.any(aggregate_load < 0) or np.any(pv_profile < 0):
        raise ValueError("ERROR: load and PV profiles must be non-negative")
    grid = grid or TimeGrid(hours=len(aggregate_load), horizon_hours=1)
    if aggregate_load.shape != (grid.hours,) or pv_profile.shape != (grid.hours,):
        raise ValueError(f"ERROR: profiles must have length {grid.hours}")
    fleet_spec = fleet_spec or FleetSpec()

    rng = np.random.default_rng(seed)
    width = len(str(n - 1))
    pool = []
    for num in range(n):
        load = aggregate_load / n * (1.0 + rng.uniform(-load_noise, load_noise))
        pv = pv_profile / n * (1.0 + rng.uniform(-pv_noise, pv_noise))

        ev = None
        if rng.random() < fleet_spec.ev_share:
            arrival = int(rng.integers(fleet_spec.arrival_hours[0], fleet_spec.arrival_hours[1] + 1))
            dwell = int(rng.integers(fleet_spec.dwell_hours[0], fleet_spec.dwell_hours[1] + 1))
            arrival = min(arrival, grid.hours - 1)
            plugged = np.zeros(grid.hours, dtype=bool)
            plugged[arrival : min(arrival + dwell, grid.hours)] = True
            energy = rng.uniform(*fleet_spec.energy_kwh)
            ev = ev_bounds(plugged, energy, fleet_spec.power_kw, eta, fleet_spec.min_power_kw)

        pool.append(
            make_prosumer(f"p{num:0{width}d}", load, pv, ev, grid, g_lo, g_hi, eta)
        )

    pool = realize_rt(pool, grid, rt_noise, rng.integers(2**32))
    logger.info(
        f"Synthesized pool of {n} prosumers, "
        f"{sum(p.has_ev for p in pool)} with EVs"
    )
    return pool


# %%
def write_pool_bundle(pool, out_dir):
    """Write a pool as the four-file CSV bundle.

    Returns
    -------
    dict
        paths keyed by [prosumers], [profiles-da], [profiles-rt], [ev-windows]
    """
    if not os.path.exists(out_dir):
        os.makedirs(out_dir)
    out_files = {key: os.path.join(out_dir, name) for key, name in BUNDLE_FILES.items()}

    pd.DataFrame(
        {
            "id": [p.id for p in pool],
            "g_lo_kw": [p.g_lo for p in pool],
            "g_hi_kw": [p.g_hi for p in pool],
            "eta": [p.eta for p in pool],
        }
    ).to_csv(out_files["prosumers"], index=False)

    for res in ("da", "rt"):
        frames = [
            pd.DataFrame(
                {
                    "id": p.id,
                    "slot": np.arange(len(getattr(p, f"load_{res}"))),
                    "load_kw": getattr(p, f"load_{res}"),
                    "pv_kw": getattr(p, f"pv_{res}"),
                }
            )
            for p in pool
        ]
        pd.concat(frames, ignore_index=True).to_csv(
            out_files[f"profiles-{res}"], index=False, float_format="%.17g"
        )

    ev_frames = []
    for p in pool:
        for res in ("da", "rt"):
            ev_frames.append(
                pd.DataFrame(
                    {
                        "id": p.id,
                        "market": res,
                        "slot": np.arange(len(getattr(p, f"ev_lo_{res}"))),
                        "ev_lo_kw": getattr(p, f"ev_lo_{res}"),
                        "ev_hi_kw": getattr(p, f"ev_hi_{res}"),
                        "ev_cum_lo_kwh": getattr(p, f"cum_lo_{res}"),
                        "ev_cum_hi_kwh": getattr(p, f"cum_hi_{res}"),
                    }
                )
            )
    pd.concat(ev_frames, ignore_index=True).to_csv(
        out_files["ev-windows"], index=False, float_format="%.17g"
    )
    return out_files


def read_pool_bundle(in_dir):
    """Read a pool written by write_pool_bundle.

    Returns
    -------
    list of Prosumer
        in the row order of prosumers.csv
    """
    paths = {key: os.path.join(in_dir, name) for key, name in BUNDLE_FILES.items()}
    for key, path in paths.items():
        if not os.path.exists(path):
            raise FileNotFoundError(f"ERROR: pool bundle file {path} not found")

    df_pros = pd.read_csv(paths["prosumers"], dtype={"id": str})
    df_da = pd.read_csv(paths["profiles-da"], dtype={"id": str}).sort_values(["id", "slot"])
    df_rt = pd.read_csv(paths["profiles-rt"], dtype={"id": str}).sort_values(["id", "slot"])
    df_ev = pd.read_csv(paths["ev-windows"], dtype={"id": str}).sort_values(
        ["id", "market", "slot"]
    )
    da_groups = dict(tuple(df_da.groupby("id")))
    rt_groups = dict(tuple(df_rt.groupby("id")))
    ev_groups = dict(tuple(df_ev.groupby(["id", "market"])))

    pool = []
    for row in df_pros.itertuples(index=False):
        da, rt = da_groups[row.id], rt_groups[row.id]
        ev_da, ev_rt = ev_groups[(row.id, "da")], ev_groups[(row.id, "rt")]
        pool.append(
            Prosumer(
                id=row.id,
                load_da=da["load_kw"].to_numpy(float),
                pv_da=da["pv_kw"].to_numpy(float),
                load_rt=rt["load_kw"].to_numpy(float),
                pv_rt=rt["pv_kw"].to_numpy(float),
                ev_lo_da=ev_da["ev_lo_kw"].to_numpy(float),
                ev_hi_da=ev_da["ev_hi_kw"].to_numpy(float),
                ev_lo_rt=ev_rt["ev_lo_kw"].to_numpy(float),
                ev_hi_rt=ev_rt["ev_hi_kw"].to_numpy(float),
                cum_lo_da=ev_da["ev_cum_lo_kwh"].to_numpy(float),
                cum_hi_da=ev_da["ev_cum_hi_kwh"].to_numpy(float),
                cum_lo_rt=ev_rt["ev_cum_lo_kwh"].to_numpy(float),
                cum_hi_rt=ev_rt["ev_cum_hi_kwh"].to_numpy(float),
                g_lo=float(row.g_lo_kw),
                g_hi=float(row.g_hi_kw),
                eta=float(row.eta),
            )
        )
    logger.info(f"Read pool of {len(pool)} prosumers from {in_dir}")
    return pool

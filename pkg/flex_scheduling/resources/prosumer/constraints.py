"""Local prosumer constraints in DA and RT-deviation form.

For one prosumer and one time window, local variables are laid out as

    x = [e_0 .. e_{L-1}, g_0 .. g_{L-1}]

where in DA mode e = EV_i and g = G_i (hourly, absolute) and in RT
mode e = dEV_i and g = dG_i (quarter-hourly deviations from the DA
schedule held constant over each hour). Four families of rows are
produced: power balance, grid limits, EV charging power, and EV
cumulative energy.
"""

# %%
from dataclasses import dataclass
import numpy as np
from scipy import sparse

FAMILIES = ("balance", "grid", "ev_power", "ev_energy")

# rounding allowance when intersecting bound intervals, kW or kWh
_SLOP = 1e-9


# %%
def cumulation_matrix(size):
    """Lower-triangular matrix of ones; A @ x gives prefix sums of x."""
    return sparse.tril(np.ones((size, size)), format="csr")


@dataclass(frozen=True)
class LinearRows:
    """Rows l <= A x <= u of one constraint family."""

    family: str
    A: sparse.csr_matrix
    l: np.ndarray
    u: np.ndarray

    def violation(self, x):
        """Largest bound violation at x (0 when satisfied)."""
        Ax = self.A @ x
        return float(np.max(np.concatenate([[0.0], Ax - self.u, self.l - Ax])))


@dataclass(frozen=True)
class LocalWindow:
    """Everything one prosumer's constraints need on one window.

    Parameters
    ----------
    prosumer_id : str
    mode : str
        "da" or "rt"
    slots : range
        slot indices of the window (hours in DA mode, quarters in RT)
    dt : float
        slot length in hours
    load, pv : numpy.ndarray
        load and PV seen by the optimizer on the window
    ev_star, g_star : numpy.ndarray
        DA schedule held over the window (zeros in DA mode)
    ev_lo, ev_hi : numpy.ndarray
        charging power bounds
    cum_lo, cum_hi : numpy.ndarray
        cumulative delivered-energy bounds at the end of each slot
    e_past : float
        energy delivered before the window starts
    g_lo, g_hi, eta : float
    """

    prosumer_id: str
    mode: str
    slots: range
    dt: float
    load: np.ndarray
    pv: np.ndarray
    ev_star: np.ndarray
    g_star: np.ndarray
    ev_lo: np.ndarray
    ev_hi: np.ndarray
    cum_lo: np.ndarray
    cum_hi: np.ndarray
    e_past: float
    g_lo: float
    g_hi: float
    eta: float

    @property
    def size(self):
        return len(self.slots)

    @property
    def n_vars(self):
        return 2 * len(self.slots)


# %%
def da_window(prosumer, grid):
    """Whole-day hourly window for DA scheduling."""
    zeros = np.zeros(grid.hours)
    return LocalWindow(
        prosumer_id=prosumer.id,
        mode="da",
        slots=range(grid.hours),
        dt=grid.dt_da,
        load=prosumer.load_da,
        pv=prosumer.pv_da,
        ev_star=zeros,
        g_star=zeros,
        ev_lo=prosumer.ev_lo_da,
        ev_hi=prosumer.ev_hi_da,
        cum_lo=prosumer.cum_lo_da,
        cum_hi=prosumer.cum_hi_da,
        e_past=0.0,
        g_lo=prosumer.g_lo,
        g_hi=prosumer.g_hi,
        eta=prosumer.eta,
    )


def rt_window(prosumer, grid, hour, ev_star_da, g_star_da, e_past, observed_slots=4):
    """MPC window starting at a DA hour.

    The first observed_slots slots use the RT realization of load and
    PV; later lookahead slots use the DA profiles held over each hour.

    Parameters
    ----------
    prosumer : Prosumer
    grid : TimeGrid
    hour : int
        0-based hour at which the window starts
    ev_star_da, g_star_da : numpy.ndarray
        the prosumer's hourly DA schedule, length T
    e_past : float
        energy delivered to the battery before the window, kWh
    observed_slots : int
        number of leading slots with known realizations

    Returns
    -------
    LocalWindow
    """
    slots = grid.mpc_window(hour)
    sel = slice(slots.start, slots.stop)
    load = grid.upsample_hourly(prosumer.load_da)[sel].copy()
    pv = grid.upsample_hourly(prosumer.pv_da)[sel].copy()
    n_obs = min(observed_slots, len(slots))
    load[:n_obs] = prosumer.load_rt[slots.start : slots.start + n_obs]
    pv[:n_obs] = prosumer.pv_rt[slots.start : slots.start + n_obs]
    return LocalWindow(
        prosumer_id=prosumer.id,
        mode="rt",
        slots=slots,
        dt=grid.dt_rt,
        load=load,
        pv=pv,
        ev_star=grid.upsample_hourly(ev_star_da)[sel],
        g_star=grid.upsample_hourly(g_star_da)[sel],
        ev_lo=prosumer.ev_lo_rt[sel],
        ev_hi=prosumer.ev_hi_rt[sel],
        cum_lo=prosumer.cum_lo_rt[sel],
        cum_hi=prosumer.cum_hi_rt[sel],
        e_past=float(e_past),
        g_lo=prosumer.g_lo,
        g_hi=prosumer.g_hi,
        eta=prosumer.eta,
    )


# %%
def _select(size, block):
    """Columns of block (0 = e, 1 = g) in the local layout."""
    eye = sparse.identity(size, format="csr")
    empty = sparse.csr_matrix((size, size))
    return sparse.hstack([eye, empty] if block == 0 else [empty, eye], format="csr")


def build_power_balance(win):
    """Power balance: L + EV* + dEV = S + G* + dG on every slot.

    Rearranged as dEV - dG = S + G* - L - EV*. In DA mode the starred
    terms are zero, giving EV - G = S - L.
    """
    size = win.size
    A = _select(size, 0) - _select(size, 1)
    rhs = win.pv + win.g_star - win.load - win.ev_star
    return LinearRows("balance", A, rhs.copy(), rhs.copy())


def build_grid_limits(win):
    """Grid import box: G_lo <= G* + dG <= G_hi."""
    size = win.size
    return LinearRows(
        "grid",
        _select(size, 1),
        win.g_lo - win.g_star,
        win.g_hi - win.g_star,
    )


def build_ev_power(win):
    """Charging power box: EV_lo <= EV* + dEV <= EV_hi, zero when unplugged."""
    size = win.size
    return LinearRows("ev_power", _select(size, 0), win.ev_lo - win.ev_star, win.ev_hi - win.ev_star)


def build_ev_energy(win):
    """Cumulative energy: cum_lo <= E_past + eta dt A (EV* + dEV) <= cum_hi.

    Efficiency scales the energy reaching the battery; the grid sees
    the full charging power.
    """
    size = win.size
    cum = cumulation_matrix(size)
    scale = win.eta * win.dt
    baseline = win.e_past + scale * (cum @ win.ev_star)
    A = scale * (cum @ _select(size, 0))
    return LinearRows("ev_energy", sparse.csr_matrix(A), win.cum_lo - baseline, win.cum_hi - baseline)


def build_local(win):
    """All four constraint families for one window, in FAMILIES order."""
    return [
        build_power_balance(win),
        build_grid_limits(win),
        build_ev_power(win),
        build_ev_energy(win),
    ]


def project_ev_path(win, ev):
    """Move an absolute EV path onto the window's local constraints.

    Solver output meets the cumulative energy rows only to residual
    tolerance, which breaks pinned targets (cum_lo == cum_hi). A
    backward pass computes the cumulative energy reachable at the end
    of each slot; a forward pass then keeps each slot as close to ev
    as that range allows. Charging stays inside both the power box and
    the grid box implied by the balance.

    Parameters
    ----------
    win : LocalWindow
    ev : numpy.ndarray
        absolute charging power (EV* + dEV), length win.size

    Returns
    -------
    numpy.ndarray or None
        projected path, or None when the window admits no path
    """
    scale = win.eta * win.dt
    lo = np.maximum(win.ev_lo, win.g_lo - win.load + win.pv)
    hi = np.minimum(win.ev_hi, win.g_hi - win.load + win.pv)
    if np.any(lo > hi + _SLOP):
        return None

    reach_lo = np.asarray(win.cum_lo, dtype=float).copy()
    reach_hi = np.asarray(win.cum_hi, dtype=float).copy()
    for t in range(win.size - 2, -1, -1):
        reach_lo[t] = max(reach_lo[t], reach_lo[t + 1] - scale * hi[t + 1])
        reach_hi[t] = min(reach_hi[t], reach_hi[t + 1] - scale * lo[t + 1])
    if np.any(reach_lo > reach_hi + _SLOP):
        return None

    out = np.empty(win.size)
    energy = win.e_past
    for t in range(win.size):
        step_lo = max(lo[t], (reach_lo[t] - energy) / scale)
        step_hi = min(hi[t], (reach_hi[t] - energy) / scale)
        if step_lo > step_hi + _SLOP:
            return None
        out[t] = min(max(ev[t], step_lo), step_hi)
        energy += scale * out[t]
    return out


def stack_rows(rows):
    """Stack LinearRows into a single (A, l, u)."""
    A = sparse.vstack([r.A for r in rows], format="csr")
    l = np.concatenate([r.l for r in rows])
    u = np.concatenate([r.u for r in rows])
    return A, l, u


# %%
def check_day_feasibility(prosumer, grid, ev_star_da, g_star_da, dev_ev, dev_g):
    """Re-check a full implemented day against realized data.

    Independent of any solver report: builds the whole-day RT window
    on realized load and PV with no prior energy and evaluates every
    family at the implemented deviations.

    Parameters
    ----------
    prosumer : Prosumer
    grid : TimeGrid
    ev_star_da, g_star_da : numpy.ndarray
        hourly DA schedule
    dev_ev, dev_g : numpy.ndarray
        implemented quarter-hourly deviations, length 4T

    Returns
    -------
    dict
        largest violation per family, plus "unplugged_dev" (largest
        |EV* + dEV| on unplugged slots)
    """
    win = LocalWindow(
        prosumer_id=prosumer.id,
        mode="rt",
        slots=range(grid.rt_len),
        dt=grid.dt_rt,
        load=prosumer.load_rt,
        pv=prosumer.pv_rt,
        ev_star=grid.upsample_hourly(ev_star_da),
        g_star=grid.upsample_hourly(g_star_da),
        ev_lo=prosumer.ev_lo_rt,
        ev_hi=prosumer.ev_hi_rt,
        cum_lo=prosumer.cum_lo_rt,
        cum_hi=prosumer.cum_hi_rt,
        e_past=0.0,
        g_lo=prosumer.g_lo,
        g_hi=prosumer.g_hi,
        eta=prosumer.eta,
    )
    x = np.concatenate([dev_ev, dev_g])
    report = {rows.family: rows.violation(x) for rows in build_local(win)}
    unplugged = ~prosumer.plugged_rt()
    report["unplugged_dev"] = float(
        np.max(np.abs(win.ev_star[unplugged] + dev_ev[unplugged]), initial=0.0)
    )
    return report

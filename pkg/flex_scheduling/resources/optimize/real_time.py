"""Real-time deviation problem solved at each MPC hour.

At hour h the aggregator chooses quarter-hourly deviations dEV_i, dG_i
from the DA schedule over the lookahead window. The objective is the
RT cost of the aggregate deviation dG, lambda_RT/2 times its variance
under RT price error, and imbalance charges.

Imbalance charges depend on the system sign s = sgn(p_RT - p_DA):
deviations that worsen the system pay delta_minus, deviations that
relieve it earn delta_plus. Per slot the four cases collapse to

    k * (delta_plus * s * x + (delta_minus - delta_plus) * max(s * x, 0))

with k = dt * 1e-3 MWh/kW, which is convex whenever
delta_plus <= delta_minus. The max term is carried by an epigraph
variable u >= 0, u >= s * x, keeping the problem a convex QP.
"""

# %%
import logging
from dataclasses import dataclass, field
import numpy as np
from scipy import sparse
from ..market.prices import MWH_PER_KWH, check_covariance, rt_window_covariance
from ..prosumer.constraints import build_local, project_ev_path, rt_window, stack_rows
from .qp import InfeasibleError, QpProblem, QpSettings, require_optimal, solve_qp

logger = logging.getLogger(__name__)

TIE_BREAK = 1e-9
SLACK_PENALTY = 1e4  # $/kWh
REGIMES = ("caiso", "uk", "germany")


# %%
@dataclass(frozen=True)
class ImbalanceRegime:
    """Imbalance prices, $/MWh.

    Parameters
    ----------
    delta_plus : float
        paid to the aggregator for deviations relieving the system
    delta_minus : float
        charged for deviations worsening the system
    mode : str
        "caiso" (both zero), "uk" (symmetric), "germany" (plus < minus)
    """

    delta_plus: float = 0.0
    delta_minus: float = 0.0
    mode: str = "caiso"

    def __post_init__(self):
        if self.mode not in REGIMES:
            raise ValueError(f"ERROR: regime must be one of {REGIMES}, got {self.mode}")
        if self.delta_plus < 0 or self.delta_minus < 0:
            raise ValueError("ERROR: imbalance prices must be non-negative")
        if self.mode == "caiso" and (self.delta_plus != 0 or self.delta_minus != 0):
            raise ValueError("ERROR: caiso regime has zero imbalance prices")
        if self.mode == "uk" and self.delta_plus != self.delta_minus:
            raise ValueError("ERROR: uk regime requires delta_plus == delta_minus")
        if self.mode == "germany" and not self.delta_plus < self.delta_minus:
            raise ValueError("ERROR: germany regime requires delta_plus < delta_minus")


@dataclass(frozen=True)
class ImbalanceBreakdown:
    """Imbalance charges per case, $ (negative = payment received).

    case_1: system short, dG > 0 (pays delta_minus)
    case_2: system short, dG < 0 (earns delta_plus)
    case_3: system long, dG > 0 (earns delta_plus)
    case_4: system long, dG < 0 (pays delta_minus)
    """

    case_1: float = 0.0
    case_2: float = 0.0
    case_3: float = 0.0
    case_4: float = 0.0

    @property
    def total(self):
        return self.case_1 + self.case_2 + self.case_3 + self.case_4

    def as_dict(self):
        return {
            "case_1": self.case_1,
            "case_2": self.case_2,
            "case_3": self.case_3,
            "case_4": self.case_4,
            "total": self.total,
        }


def system_sign(p_rt, p_da_up):
    """sgn(p_RT - p_DA) per slot; ties give 0 (no imbalance signal)."""
    return np.sign(np.asarray(p_rt, dtype=float) - np.asarray(p_da_up, dtype=float))


def imbalance_cost(dg, p_rt, p_da_up, regime, dt=0.25):
    """Imbalance charges for an aggregate deviation path.

    Parameters
    ----------
    dg : array-like
        aggregate deviation per slot, kW
    p_rt, p_da_up : array-like
        RT price and DA price held over the hour, $/MWh
    regime : ImbalanceRegime
    dt : float
        slot length, hours

    Returns
    -------
    total : float
        summed charge over all slots, $
    breakdown : ImbalanceBreakdown
    """
    dg = np.asarray(dg, dtype=float)
    p_rt = np.asarray(p_rt, dtype=float)
    p_da_up = np.asarray(p_da_up, dtype=float)
    if not dg.shape == p_rt.shape == p_da_up.shape:
        raise ValueError(
            f"ERROR: length mismatch dg {dg.shape}, p_rt {p_rt.shape}, p_da {p_da_up.shape}"
        )
    sign = system_sign(p_rt, p_da_up)
    active = sign != 0
    w_short = np.where(active, (sign + 1) / 2, 0.0)
    w_long = np.where(active, (sign - 1) / 2, 0.0)
    scale = dt * MWH_PER_KWH
    up = np.maximum(dg, 0.0) * scale
    down = np.maximum(-dg, 0.0) * scale

    breakdown = ImbalanceBreakdown(
        case_1=float(np.sum(regime.delta_minus * w_short * up)),
        case_2=float(np.sum(-regime.delta_plus * w_short * down)),
        case_3=float(np.sum(regime.delta_plus * w_long * up)),
        case_4=float(np.sum(-regime.delta_minus * w_long * down)),
    )
    return breakdown.total, breakdown


# %%
@dataclass
class RtProblem:
    """Deviation problem for one MPC hour.

    Parameters
    ----------
    hour : int
        0-based hour at which the window starts
    windows : list of LocalWindow
        one per prosumer, all over the same RT slots
    p_window : numpy.ndarray
        realized RT price on the observed hour, forecast beyond, $/MWh
    p_da_up : numpy.ndarray
        cleared DA price held over each hour on the window, $/MWh
    lambda_rt : float
    c_rt : numpy.ndarray
        window-sized RT price-error covariance
    regime : ImbalanceRegime
    dt : float
        slot length, hours
    implement_slots : int
        slots committed after solving (the first hour)
    """

    hour: int
    windows: list
    p_window: np.ndarray
    p_da_up: np.ndarray
    lambda_rt: float
    c_rt: np.ndarray
    regime: ImbalanceRegime
    dt: float = 0.25
    implement_slots: int = 4

    def __post_init__(self):
        size = self.size
        if self.lambda_rt < 0:
            raise ValueError(f"ERROR: lambda_rt must be >= 0, got {self.lambda_rt}")
        if any(w.slots != self.windows[0].slots for w in self.windows):
            raise ValueError("ERROR: prosumer windows are not aligned")
        if self.p_window.shape != (size,) or self.p_da_up.shape != (size,):
            raise ValueError(f"ERROR: window prices must have length {size}")
        if self.c_rt.shape != (size, size):
            raise ValueError(f"ERROR: c_rt shape {self.c_rt.shape} != {(size, size)}")
        check_covariance(self.c_rt, "c_rt")

    @property
    def size(self):
        return len(self.windows[0].slots)

    @property
    def slots(self):
        return self.windows[0].slots

    @property
    def sign(self):
        return system_sign(self.p_window, self.p_da_up)

    @property
    def energy_scale(self):
        return self.dt * MWH_PER_KWH

    @property
    def n_implemented(self):
        return min(self.implement_slots, self.size)


def build_rt_problem(
    hour,
    grid,
    pool,
    ev_star,
    g_star,
    e_past,
    p_rt_realized,
    p_rt_hat,
    p_da,
    lambda_rt,
    c_rt_template,
    regime,
):
    """Assemble the RtProblem for an MPC hour.

    Parameters
    ----------
    hour : int
    grid : TimeGrid
    pool : list of Prosumer
    ev_star, g_star : numpy.ndarray
        (N, T) DA schedule
    e_past : numpy.ndarray
        (N,) energy delivered before the hour, kWh
    p_rt_realized : numpy.ndarray
        realized RT prices, length 4T (only the observed hour is read)
    p_rt_hat : numpy.ndarray
        RT price forecast, length 4T
    p_da : numpy.ndarray
        cleared DA prices, length T
    lambda_rt : float
    c_rt_template : numpy.ndarray
        4T_H x 4T_H RT covariance
    regime : ImbalanceRegime

    Returns
    -------
    RtProblem
    """
    windows = [
        rt_window(p, grid, hour, ev_star[i], g_star[i], e_past[i])
        for i, p in enumerate(pool)
    ]
    slots = grid.mpc_window(hour)
    observed = grid.hour_to_quarters(hour)
    p_window = np.asarray(p_rt_hat, dtype=float)[slots.start : slots.stop].copy()
    p_window[: len(observed)] = np.asarray(p_rt_realized, dtype=float)[observed.start : observed.stop]
    p_da_up = grid.upsample_hourly(p_da)[slots.start : slots.stop]
    return RtProblem(
        hour=hour,
        windows=windows,
        p_window=p_window,
        p_da_up=p_da_up,
        lambda_rt=lambda_rt,
        c_rt=rt_window_covariance(c_rt_template, len(slots)),
        regime=regime,
        dt=grid.dt_rt,
        implement_slots=len(observed),
    )


# %%
@dataclass
class RtStepSolution:
    """Optimal deviations over one MPC window.

    dev_ev and dev_g are (N, L) arrays; the balance is closed exactly
    from dev_ev, so dev_g.sum(axis=0) is the aggregate deviation.
    """

    hour: int
    slots: range
    dev_ev: np.ndarray
    dev_g: np.ndarray
    objective: float
    price_term: float
    risk_term: float
    imbalance: ImbalanceBreakdown
    slack_kwh: float
    epigraph_gap: float
    status: str
    iterations: int
    n_implemented: int
    layout: dict = field(repr=False, default_factory=dict)
    qp_x: np.ndarray = field(repr=False, default=None)
    qp_y: np.ndarray = field(repr=False, default=None)

    @property
    def dg_total(self):
        return self.dev_g.sum(axis=0)

    @property
    def dev_total(self):
        return self.dev_ev.sum(axis=0)

    @property
    def implemented(self):
        """Slice of the window committed at this hour."""
        return slice(0, self.n_implemented)


def rt_cost_terms(dg_total, problem):
    """Price, risk and imbalance terms of the RT objective on the window."""
    energy = np.asarray(dg_total, dtype=float) * problem.energy_scale
    price_term = float(problem.p_window @ energy)
    risk_term = float(0.5 * problem.lambda_rt * energy @ problem.c_rt @ energy)
    _, breakdown = imbalance_cost(
        dg_total, problem.p_window, problem.p_da_up, problem.regime, problem.dt
    )
    return price_term, risk_term, breakdown


def _layout(problem, with_slack):
    size = problem.size
    n_pool = len(problem.windows)
    spread = problem.regime.delta_minus - problem.regime.delta_plus
    epi_slots = np.flatnonzero(problem.sign != 0) if spread > 0 else np.array([], dtype=int)
    block = 2 * size
    n_local = block * n_pool
    return {
        "size": size,
        "n_pool": n_pool,
        "block": block,
        "agg": slice(n_local, n_local + size),
        "epi": slice(n_local + size, n_local + size + epi_slots.size),
        "epi_slots": epi_slots,
        "slack": slice(
            n_local + size + epi_slots.size,
            n_local + size + epi_slots.size + (n_pool * size if with_slack else 0),
        ),
        "with_slack": with_slack,
    }


def assemble_rt(problem, with_slack=False):
    """Build the QpProblem for an RtProblem.

    Variable layout: per prosumer [dEV_i (L), dG_i (L)], aggregate
    dG (L), epigraph u (one per slot with nonzero system sign when
    delta_minus > delta_plus), then optional energy slacks (N x L).

    Returns
    -------
    qp : QpProblem
    layout : dict
        variable index map
    """
    layout = _layout(problem, with_slack)
    size, n_pool, block = layout["size"], layout["n_pool"], layout["block"]
    n_epi = layout["epi_slots"].size
    n_slack = n_pool * size if with_slack else 0
    n_vars = layout["slack"].stop
    scale = problem.energy_scale
    regime = problem.regime
    sign = problem.sign

    a_blocks, l_parts, u_parts = [], [], []
    for num, win in enumerate(problem.windows):
        rows = build_local(win)
        offset = num * block
        if not with_slack:
            A, l, u = stack_rows(rows)
            a_blocks.append(_place(A, offset, block, n_vars))
            l_parts.append(l)
            u_parts.append(u)
            continue

        # energy rows split into one-sided rows relaxed by a slack
        A, l, u = stack_rows(rows[:3])
        a_blocks.append(_place(A, offset, block, n_vars))
        l_parts.append(l)
        u_parts.append(u)
        energy = rows[3]
        energy_cols = _place(energy.A, offset, block, n_vars)
        slack_cols = _shift_cols(
            sparse.identity(size), layout["slack"].start + num * size, n_vars
        )
        a_blocks.append(energy_cols + slack_cols)
        l_parts.append(energy.l)
        u_parts.append(np.full(size, np.inf))
        a_blocks.append(energy_cols - slack_cols)
        l_parts.append(np.full(size, -np.inf))
        u_parts.append(energy.u)

    # dG - sum_i dG_i = 0
    agg = sparse.lil_matrix((size, n_vars))
    for num in range(n_pool):
        agg[:, num * block + size : (num + 1) * block] = -sparse.identity(size)
    agg[:, layout["agg"]] = sparse.identity(size)
    a_blocks.append(agg.tocsr())
    l_parts.append(np.zeros(size))
    u_parts.append(np.zeros(size))

    # u - s x >= 0 and u >= 0
    if n_epi:
        epi = sparse.lil_matrix((2 * n_epi, n_vars))
        for pos, slot in enumerate(layout["epi_slots"]):
            u_col = layout["epi"].start + pos
            epi[pos, u_col] = 1.0
            epi[pos, layout["agg"].start + slot] = -sign[slot]
            epi[n_epi + pos, u_col] = 1.0
        a_blocks.append(epi.tocsr())
        l_parts.append(np.zeros(2 * n_epi))
        u_parts.append(np.full(2 * n_epi, np.inf))

    if with_slack:
        slack_rows = sparse.lil_matrix((n_slack, n_vars))
        slack_rows[:, layout["slack"]] = sparse.identity(n_slack)
        a_blocks.append(slack_rows.tocsr())
        l_parts.append(np.zeros(n_slack))
        u_parts.append(np.full(n_slack, np.inf))

    A = sparse.vstack(a_blocks, format="csc")
    l = np.concatenate(l_parts)
    u = np.concatenate(u_parts)

    q = np.zeros(n_vars)
    q[layout["agg"]] = scale * (problem.p_window + regime.delta_plus * sign)
    q[layout["epi"]] = scale * (regime.delta_minus - regime.delta_plus)
    q[layout["slack"]] = SLACK_PENALTY

    diag = np.zeros(n_vars)
    for num in range(n_pool):
        diag[num * block + size : (num + 1) * block] = 2 * TIE_BREAK
    P = sparse.diags(diag, format="lil")
    P[layout["agg"], layout["agg"]] = problem.lambda_rt * scale**2 * problem.c_rt
    return QpProblem(P.tocsc(), q, A, l, u), layout


def _place(local, offset, width, n_vars):
    """Move the first `width` columns of a row block to column offset."""
    local = sparse.csr_matrix(local)[:, :width]
    return _shift_cols(local, offset, n_vars)


def _shift_cols(mat, offset, n_vars):
    mat = sparse.coo_matrix(mat)
    return sparse.csr_matrix(
        (mat.data, (mat.row, mat.col + offset)), shape=(mat.shape[0], n_vars)
    )


# %%
def shift_warm_start(previous, problem):
    """Shift the previous hour's primal/dual vectors forward one hour.

    Works on the variable and row layout of assemble_rt without slacks;
    returns None when either problem uses slacks.
    """
    if previous is None or previous.layout.get("with_slack"):
        return None
    layout = _layout(problem, False)
    old = previous.layout
    shift = previous.n_implemented
    old_size, new_size = old["size"], layout["size"]
    if old["n_pool"] != layout["n_pool"]:
        return None

    def carry(vec, n_blocks):
        out = np.zeros(n_blocks * new_size)
        keep = min(new_size, old_size - shift)
        for num in range(n_blocks):
            src = vec[num * old_size + shift : num * old_size + shift + keep]
            out[num * new_size : num * new_size + keep] = src
        return out

    # columns: 2 per prosumer + aggregate; rows: 4 families per prosumer + aggregate
    n_var_blocks = 2 * layout["n_pool"] + 1
    n_row_blocks = 4 * layout["n_pool"] + 1
    x_main = carry(previous.qp_x[: n_var_blocks * old_size], n_var_blocks)
    y_main = carry(previous.qp_y[: n_row_blocks * old_size], n_row_blocks)

    agg = x_main[layout["agg"]]
    epi_u = np.maximum(problem.sign[layout["epi_slots"]] * agg[layout["epi_slots"]], 0.0)
    n_epi = layout["epi_slots"].size
    x0 = np.concatenate([x_main, epi_u])
    y0 = np.concatenate([y_main, np.zeros(2 * n_epi)])
    return x0, y0


def _extract(problem, layout, result):
    size, n_pool, block = layout["size"], layout["n_pool"], layout["block"]
    x_local = result.x[: block * n_pool].reshape(n_pool, 2, size)
    dev_ev, dev_g = [], []
    for num, win in enumerate(problem.windows):
        ev = np.clip(x_local[num, 0], win.ev_lo - win.ev_star, win.ev_hi - win.ev_star)
        if not layout["with_slack"]:
            path = project_ev_path(win, win.ev_star + ev)
            if path is not None:
                ev = path - win.ev_star
        dev_ev.append(ev)
        dev_g.append(win.load + win.ev_star + ev - win.pv - win.g_star)
    dev_ev = np.vstack(dev_ev)
    dev_g = np.vstack(dev_g)

    epi_slots = layout["epi_slots"]
    gap = 0.0
    if epi_slots.size:
        agg_raw = result.x[layout["agg"]]
        hinge = np.maximum(problem.sign[epi_slots] * agg_raw[epi_slots], 0.0)
        gap = float(np.max(np.abs(result.x[layout["epi"]] - hinge)))
    slack = float(result.x[layout["slack"]].sum()) if layout["with_slack"] else 0.0
    return dev_ev, dev_g, gap, slack


def _needs_slack(result, settings):
    """Certified infeasible, or stalled with the primal residual above tolerance."""
    if result.status == "infeasible":
        return True
    return result.status in ("max-iter", "inaccurate") and not result.pri_res <= settings.eps_abs


def solve_rt_step(problem, settings=None, warm_start=None):
    """Solve one MPC window.

    Tries the problem as stated; if it is infeasible (for example when
    realized load pushes the balance outside grid limits), or the solver
    stalls with a primal residual above eps_abs, the EV energy bounds
    are relaxed with slacks priced at 1e4 $/kWh and it is solved
    again.

    Parameters
    ----------
    problem : RtProblem
    settings : QpSettings, optional
    warm_start : RtStepSolution, optional
        previous hour's solution, shifted forward one hour

    Returns
    -------
    RtStepSolution

    Raises
    ------
    InfeasibleError
        when the window stays infeasible after slack repair
    SolverError
        when the solver does not converge
    """
    settings = settings or QpSettings()
    context = f"RT hour {problem.hour}"
    qp, layout = assemble_rt(problem, with_slack=False)
    result = solve_qp(qp, settings, warm_start=shift_warm_start(warm_start, problem))

    if _needs_slack(result, settings):
        logger.warning(
            f"{context}: window infeasible (solver status {result.status}, primal residual "
            f"{result.pri_res:.2e}), relaxing EV energy bounds with slack"
        )
        qp, layout = assemble_rt(problem, with_slack=True)
        result = solve_qp(qp, settings)
        if result.status == "infeasible":
            raise InfeasibleError(
                f"ERROR: {context} infeasible after slack repair", result
            )
    require_optimal(result, context)

    dev_ev, dev_g, gap, slack = _extract(problem, layout, result)
    price_term, risk_term, breakdown = rt_cost_terms(dev_g.sum(axis=0), problem)
    objective = price_term + risk_term + breakdown.total + SLACK_PENALTY * slack
    logger.debug(
        f"{context}: objective {objective:.5f} $ in {result.iterations} iterations"
    )
    return RtStepSolution(
        hour=problem.hour,
        slots=problem.slots,
        dev_ev=dev_ev,
        dev_g=dev_g,
        objective=objective,
        price_term=price_term,
        risk_term=risk_term,
        imbalance=breakdown,
        slack_kwh=slack,
        epigraph_gap=gap,
        status=result.status,
        iterations=result.iterations,
        n_implemented=problem.n_implemented,
        layout=layout,
        qp_x=result.x,
        qp_y=result.y,
    )

"""Day-ahead mean-variance scheduling of a prosumer pool.

Minimizes expected DA cost plus lambda/2 times the variance of that
cost under price-forecast error, over per-prosumer EV charging and
grid import. Energy is priced in MWh: a kW value held for dt hours
contributes dt * 1e-3 MWh.

Variable layout: for each prosumer i, [EV_i (T), G_i (T)], followed
by the aggregate G (T), linked by G = sum_i G_i.
"""

# %%
import logging
from dataclasses import dataclass, field
import numpy as np
import pandas as pd
from scipy import sparse
from ..market.prices import MWH_PER_KWH, check_covariance
from ..prosumer.constraints import build_local, da_window, project_ev_path, stack_rows
from .qp import (
    InfeasibleError,
    QpProblem,
    QpSettings,
    require_optimal,
    solve_qp,
)

logger = logging.getLogger(__name__)

TIE_BREAK = 1e-9


# %%
class InfeasiblePoolError(InfeasibleError):
    """DA problem infeasible; names the first infeasible prosumer."""

    def __init__(self, message, prosumer_id=None, result=None):
        super().__init__(message, result)
        self.prosumer_id = prosumer_id


@dataclass
class DaProblem:
    """Inputs of the DA scheduling problem.

    Parameters
    ----------
    p_da : numpy.ndarray
        expected DA prices, $/MWh, length T
    lambda_da : float
        risk aversion, >= 0
    c_da : numpy.ndarray
        T x T price-error covariance
    pool : list of Prosumer
    grid : TimeGrid
    """

    p_da: np.ndarray
    lambda_da: float
    c_da: np.ndarray
    pool: list
    grid: object

    def __post_init__(self):
        self.p_da = np.asarray(self.p_da, dtype=float)
        self.c_da = np.asarray(self.c_da, dtype=float)
        hours = self.grid.hours
        if self.lambda_da < 0:
            raise ValueError(f"ERROR: lambda_da must be >= 0, got {self.lambda_da}")
        if self.p_da.shape != (hours,):
            raise ValueError(f"ERROR: p_da length {self.p_da.shape} != {hours}")
        if self.c_da.shape != (hours, hours):
            raise ValueError(f"ERROR: c_da shape {self.c_da.shape} != {(hours, hours)}")
        check_covariance(self.c_da, "c_da")
        if not self.pool:
            raise ValueError("ERROR: DA problem needs at least one prosumer")

    @property
    def energy_scale(self):
        """MWh per kW held over one DA slot."""
        return self.grid.dt_da * MWH_PER_KWH


@dataclass
class DaSolution:
    """Optimal DA schedule.

    ev and g are (N, T) arrays in pool order; aggregates are their
    column sums, so aggregation holds exactly.
    """

    prosumer_ids: list
    ev: np.ndarray
    g: np.ndarray
    objective: float
    price_term: float
    risk_term: float
    status: str
    iterations: int
    pri_res: float
    dua_res: float
    qp_x: np.ndarray = field(repr=False, default=None)
    qp_y: np.ndarray = field(repr=False, default=None)

    @property
    def g_total(self):
        return self.g.sum(axis=0)

    @property
    def ev_total(self):
        return self.ev.sum(axis=0)

    @property
    def predicted_cost(self):
        return self.price_term

    def summary(self):
        return {
            "objective": self.objective,
            "predicted_cost": self.predicted_cost,
            "price_term": self.price_term,
            "risk_term": self.risk_term,
            "status": self.status,
            "iterations": self.iterations,
            "primal_residual": self.pri_res,
            "dual_residual": self.dua_res,
        }


# %%
def da_cost_terms(g_total, p_da, lambda_da, c_da, energy_scale):
    """Price and risk terms of the DA objective for an aggregate schedule."""
    energy = np.asarray(g_total, dtype=float) * energy_scale
    price_term = float(p_da @ energy)
    risk_term = float(0.5 * lambda_da * energy @ c_da @ energy)
    return price_term, risk_term


def assemble_da(problem):
    """Build the QpProblem for a DaProblem.

    Returns
    -------
    qp : QpProblem
    windows : list of LocalWindow
        one per prosumer, in pool order
    """
    hours = problem.grid.hours
    n_pool = len(problem.pool)
    block = 2 * hours
    n_vars = block * n_pool + hours
    agg = slice(block * n_pool, n_vars)
    scale = problem.energy_scale

    windows = [da_window(p, problem.grid) for p in problem.pool]
    local_rows = [stack_rows(build_local(w)) for w in windows]
    A_local = sparse.block_diag([rows[0] for rows in local_rows], format="csr")
    A_local = sparse.hstack([A_local, sparse.csr_matrix((A_local.shape[0], hours))], format="csr")

    # G - sum_i G_i = 0
    pick_g = sparse.hstack(
        [sparse.csr_matrix((hours, hours)), sparse.identity(hours, format="csr")], format="csr"
    )
    A_agg = sparse.hstack(
        [-pick_g] * n_pool + [sparse.identity(hours, format="csr")], format="csr"
    )

    A = sparse.vstack([A_local, A_agg], format="csc")
    l = np.concatenate([rows[1] for rows in local_rows] + [np.zeros(hours)])
    u = np.concatenate([rows[2] for rows in local_rows] + [np.zeros(hours)])

    q = np.zeros(n_vars)
    q[agg] = problem.p_da * scale

    diag = np.zeros(n_vars)
    for num in range(n_pool):
        diag[num * block + hours : (num + 1) * block] = 2 * TIE_BREAK
    P = sparse.diags(diag, format="lil")
    P[agg, agg] = problem.lambda_da * scale**2 * problem.c_da
    return QpProblem(P.tocsc(), q, A, l, u), windows


def _diagnose_pool(problem, settings):
    """Return the id of the first prosumer whose DA constraints are infeasible."""
    for prosumer in problem.pool:
        A, l, u = stack_rows(build_local(da_window(prosumer, problem.grid)))
        n_vars = A.shape[1]
        check = QpProblem(sparse.csc_matrix((n_vars, n_vars)), np.zeros(n_vars), A, l, u)
        if solve_qp(check, settings).status == "infeasible":
            return prosumer.id
    return None


def solve_da(problem, settings=None, warm_start=None):
    """Solve the DA mean-variance scheduling problem.

    Parameters
    ----------
    problem : DaProblem
    settings : QpSettings, optional
    warm_start : DaSolution, optional
        previous solution of a problem with the same pool and horizon,
        e.g. after updating prices

    Returns
    -------
    DaSolution

    Raises
    ------
    InfeasiblePoolError
        naming the first prosumer whose local constraints cannot be met
    SolverError
        when the solver stops without an optimal status
    """
    settings = settings or QpSettings()
    hours = problem.grid.hours
    logger.info(
        f"Solving DA schedule for {len(problem.pool)} prosumers, "
        f"lambda_da={problem.lambda_da} ..."
    )
    qp, windows = assemble_da(problem)
    start = None
    if warm_start is not None:
        start = (warm_start.qp_x, warm_start.qp_y)
    result = solve_qp(qp, settings, warm_start=start)

    if result.status == "infeasible":
        bad_id = _diagnose_pool(problem, settings)
        raise InfeasiblePoolError(
            f"ERROR: DA pool infeasible, first infeasible prosumer: {bad_id}",
            prosumer_id=bad_id,
            result=result,
        )
    require_optimal(result, "DA schedule")

    block = 2 * hours
    n_pool = len(problem.pool)
    x_local = result.x[: block * n_pool].reshape(n_pool, 2, hours)

    # solver slop breaks pinned energy targets; project, then close the balance exactly
    ev = []
    for num, win in enumerate(windows):
        path = project_ev_path(win, x_local[num, 0])
        if path is None:
            raise InfeasiblePoolError(
                f"ERROR: DA schedule for {win.prosumer_id} cannot meet its local constraints",
                prosumer_id=win.prosumer_id,
                result=result,
            )
        ev.append(path)
    ev = np.vstack(ev)
    g = np.vstack([w.load - w.pv + ev[i] for i, w in enumerate(windows)])

    price_term, risk_term = da_cost_terms(
        g.sum(axis=0), problem.p_da, problem.lambda_da, problem.c_da, problem.energy_scale
    )
    solution = DaSolution(
        prosumer_ids=[p.id for p in problem.pool],
        ev=ev,
        g=g,
        objective=price_term + risk_term,
        price_term=price_term,
        risk_term=risk_term,
        status=result.status,
        iterations=result.iterations,
        pri_res=result.pri_res,
        dua_res=result.dua_res,
        qp_x=result.x,
        qp_y=result.y,
    )
    logger.info(
        f"DA schedule: objective {solution.objective:.4f} $ "
        f"(price {price_term:.4f}, risk {risk_term:.6f}) in {result.iterations} iterations"
    )
    return solution


# %%
def write_da_schedule(solution, csv_path):
    """Write the per-prosumer schedule as prosumer,hour,g_kw,ev_kw."""
    n_pool, hours = solution.g.shape
    df = pd.DataFrame(
        {
            "prosumer": np.repeat(solution.prosumer_ids, hours),
            "hour": np.tile(np.arange(hours), n_pool),
            "g_kw": solution.g.ravel(),
            "ev_kw": solution.ev.ravel(),
        }
    )
    df.to_csv(csv_path, index=False, float_format="%.17g")


def read_da_schedule(csv_path, pool):
    """Read a schedule CSV into (ev, g) arrays in pool order.

    Returns
    -------
    ev, g : numpy.ndarray
        shape (N, T)
    """
    df = pd.read_csv(csv_path, dtype={"prosumer": str})
    ev_wide = df.pivot(index="prosumer", columns="hour", values="ev_kw")
    g_wide = df.pivot(index="prosumer", columns="hour", values="g_kw")
    ids = [p.id for p in pool]
    missing = set(ids) - set(ev_wide.index)
    if missing:
        raise ValueError(f"ERROR: schedule {csv_path} missing prosumers {sorted(missing)[:5]}")
    return ev_wide.loc[ids].to_numpy(float), g_wide.loc[ids].to_numpy(float)

"""Convex QP contract shared by the DA and RT optimizers.

Problems take the OSQP form

    minimize    0.5 x'Px + q'x
    subject to  l <= Ax <= u

and are solved by OSQP (operator splitting) to residual tolerances.
A dense SLSQP fallback for small problems serves as an independent
check of the sparse path.
"""

# %%
import os
import logging
from dataclasses import dataclass, field
from importlib.metadata import version
import numpy as np
import osqp
from scipy import optimize, sparse
from scipy.io import mmwrite

logger = logging.getLogger(__name__)

DENSE_MAX_VARS = 200

# osqp >= 1.0 renamed the polish setting and residual fields and renumbered status codes
_OSQP_MAJOR = int(version("osqp").split(".")[0])
_POLISH_KEY = "polishing" if _OSQP_MAJOR >= 1 else "polish"
_PRI_RES_KEY = "prim_res" if _OSQP_MAJOR >= 1 else "pri_res"
_DUA_RES_KEY = "dual_res" if _OSQP_MAJOR >= 1 else "dua_res"

_STATUS_MAP = {
    "solved": "optimal",
    "solved inaccurate": "inaccurate",
    "maximum iterations reached": "max-iter",
    "primal infeasible": "infeasible",
    "primal infeasible inaccurate": "infeasible",
    "dual infeasible": "unbounded",
    "dual infeasible inaccurate": "unbounded",
}


# %%
class SolverError(RuntimeError):
    """Solver finished without an optimal status."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class InfeasibleError(SolverError):
    """Solver returned a primal infeasibility certificate."""


class NonConvexError(ValueError):
    """Quadratic term is not positive semidefinite."""


# %%
@dataclass(frozen=True)
class QpSettings:
    """Solver tolerances and limits.

    Parameters
    ----------
    eps_abs : float
        absolute residual tolerance
    eps_rel : float
        relative residual tolerance
    max_iter : int
        iteration cap
    polish : bool
        whether OSQP refines the solution on the detected active set
    verbose : bool
        echo OSQP iteration log
    """

    eps_abs: float = 1e-8
    eps_rel: float = 1e-6
    max_iter: int = 50000
    polish: bool = True
    verbose: bool = False

    def osqp_kwargs(self):
        return {
            "eps_abs": self.eps_abs,
            "eps_rel": self.eps_rel,
            "max_iter": self.max_iter,
            _POLISH_KEY: self.polish,
            "verbose": self.verbose,
        }


@dataclass
class QpProblem:
    """Quadratic program in (P, q, A, l, u) form.

    P is validated symmetric positive semidefinite at construction,
    which is what keeps both market objectives convex.
    """

    P: sparse.spmatrix
    q: np.ndarray
    A: sparse.spmatrix
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.P = sparse.csc_matrix(self.P, dtype=float)
        self.A = sparse.csc_matrix(self.A, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.l = np.asarray(self.l, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        n = self.q.shape[0]
        if self.P.shape != (n, n):
            raise ValueError(f"ERROR: P has shape {self.P.shape}, expected {(n, n)}")
        if self.A.shape[1] != n:
            raise ValueError(
                f"ERROR: A has {self.A.shape[1]} columns, expected {n}"
            )
        m = self.A.shape[0]
        if self.l.shape != (m,) or self.u.shape != (m,):
            raise ValueError(f"ERROR: bounds must have length {m}")
        if np.any(self.l > self.u):
            bad = int(np.argmax(self.l > self.u))
            raise ValueError(
                f"ERROR: lower bound exceeds upper bound on constraint row {bad}"
            )
        check_psd(self.P)

    @property
    def n(self):
        return self.q.shape[0]

    @property
    def m(self):
        return self.A.shape[0]

    def objective(self, x):
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.P @ x) + self.q @ x)


@dataclass
class QpResult:
    """Primal/dual solution with solver diagnostics."""

    x: np.ndarray
    y: np.ndarray
    status: str
    pri_res: float
    dua_res: float
    iterations: int
    objective: float
    info: dict = field(default_factory=dict)

    @property
    def optimal(self):
        return self.status == "optimal"


# %%
def check_psd(P, tol=1e-9):
    """Reject a quadratic term that is not symmetric PSD.

    Only the rows/columns with off-diagonal entries are checked by
    eigenvalues; purely diagonal variables only need a non-negative
    diagonal. This keeps the check cheap for block-structured problems
    where the risk term touches few variables.

    Parameters
    ----------
    P : scipy.sparse matrix
        square quadratic term
    tol : float
        eigenvalue floor, relative to the largest magnitude entry

    Raises
    ------
    NonConvexError
        when P is asymmetric or has a negative eigenvalue
    """
    P = sparse.csc_matrix(P)
    if P.nnz == 0:
        return
    scale = max(1.0, abs(P).max())
    if abs(P - P.T).max() > 1e-12 * scale:
        raise NonConvexError("ERROR: quadratic term P is not symmetric")

    off_diag = sparse.coo_matrix(P - sparse.diags(P.diagonal()))
    coupled = np.unique(np.concatenate([off_diag.row, off_diag.col]))
    diag = P.diagonal()
    loose = np.setdiff1d(np.arange(P.shape[0]), coupled)
    if loose.size and diag[loose].min() < -tol * scale:
        raise NonConvexError("ERROR: quadratic term P has a negative diagonal entry")
    if coupled.size:
        block = P[coupled][:, coupled].toarray()
        min_eig = np.linalg.eigvalsh(block).min()
        if min_eig < -tol * scale:
            raise NonConvexError(
                f"ERROR: quadratic term P is not PSD (min eigenvalue {min_eig:.3e})"
            )


def kkt_residuals(problem, x, y):
    """Primal, dual and complementarity residuals of a candidate point.

    Parameters
    ----------
    problem : QpProblem
        problem being certified
    x, y : numpy.ndarray
        primal and dual vectors (OSQP sign convention: y > 0 on an
        active upper bound, y < 0 on an active lower bound)

    Returns
    -------
    dict
        keys "primal", "dual", "complementarity" (infinity norms)
    """
    Ax = problem.A @ x
    primal = np.max(
        np.concatenate([[0.0], Ax - problem.u, problem.l - Ax])
    )
    dual = np.max(np.abs(problem.P @ x + problem.q + problem.A.T @ y), initial=0.0)
    y_up = np.maximum(y, 0.0)
    y_lo = np.minimum(y, 0.0)
    with np.errstate(invalid="ignore"):
        gap_up = np.where(np.isfinite(problem.u), y_up * (problem.u - Ax), 0.0)
        gap_lo = np.where(np.isfinite(problem.l), y_lo * (problem.l - Ax), 0.0)
    comp = np.max(np.abs(np.concatenate([gap_up, gap_lo])), initial=0.0)
    return {"primal": float(primal), "dual": float(dual), "complementarity": float(comp)}


# %%
def solve_qp(problem, settings=None, warm_start=None):
    """Solve a QpProblem with OSQP.

    Parameters
    ----------
    problem : QpProblem
        problem to solve
    settings : QpSettings, optional
        tolerances and limits, defaults to QpSettings()
    warm_start : tuple, optional
        (x0, y0) initial primal/dual guess; ignored when the
        dimensions do not match the problem

    Returns
    -------
    QpResult
        solution and diagnostics, status one of "optimal",
        "inaccurate", "max-iter", "infeasible", "unbounded"
    """
    settings = settings or QpSettings()
    solver = osqp.OSQP()
    solver.setup(
        P=sparse.triu(problem.P, format="csc"),
        q=problem.q,
        A=problem.A,
        l=problem.l,
        u=problem.u,
        **settings.osqp_kwargs(),
    )
    if warm_start is not None:
        x0, y0 = warm_start
        if x0 is not None and y0 is not None and len(x0) == problem.n and len(y0) == problem.m:
            solver.warm_start(x=np.asarray(x0, dtype=float), y=np.asarray(y0, dtype=float))
        else:
            logger.debug("Warm start dimensions do not match problem, starting cold")

    res = solver.solve()
    status = _STATUS_MAP.get(str(res.info.status).strip().lower(), "error")
    x = np.asarray(res.x, dtype=float) if res.x is not None else np.full(problem.n, np.nan)
    y = np.asarray(res.y, dtype=float) if res.y is not None else np.full(problem.m, np.nan)
    objective = problem.objective(x) if status in ("optimal", "inaccurate") else np.nan
    result = QpResult(
        x=x,
        y=y,
        status=status,
        pri_res=float(getattr(res.info, _PRI_RES_KEY)),
        dua_res=float(getattr(res.info, _DUA_RES_KEY)),
        iterations=int(res.info.iter),
        objective=objective,
        info={"osqp_status": str(res.info.status), "polish": int(res.info.status_polish)},
    )
    logger.debug(
        f"QP n={problem.n} m={problem.m}: {status} in {result.iterations} iterations"
    )
    return result


def require_optimal(result, context=""):
    """Raise when a QpResult is not usable.

    "inaccurate" solutions are accepted with a warning, since OSQP
    reports them when polishing fails on otherwise converged problems.
    """
    if result.status == "optimal":
        return result
    if result.status == "inaccurate":
        logger.warning(f"{context}: solver reports inaccurate solution, continuing")
        return result
    message = (
        f"ERROR: {context} solver status {result.status} after "
        f"{result.iterations} iterations (primal residual {result.pri_res:.2e}, "
        f"dual residual {result.dua_res:.2e})"
    )
    if result.status == "infeasible":
        raise InfeasibleError(message, result)
    raise SolverError(message, result)


# %%
def solve_qp_dense(problem, x0=None):
    """Solve a small QpProblem with dense SLSQP.

    Independent of the OSQP path, used as an oracle on problems with
    at most 200 variables. Duals are not reported.

    Parameters
    ----------
    problem : QpProblem
        problem to solve
    x0 : numpy.ndarray, optional
        starting point, zeros by default

    Returns
    -------
    QpResult
    """
    if problem.n > DENSE_MAX_VARS:
        raise ValueError(
            f"ERROR: dense fallback limited to {DENSE_MAX_VARS} variables, got {problem.n}"
        )
    P = problem.P.toarray()
    A = problem.A.toarray()
    q = problem.q
    eq = np.isclose(problem.l, problem.u)
    lo = ~eq & np.isfinite(problem.l)
    up = ~eq & np.isfinite(problem.u)

    constraints = []
    if eq.any():
        A_eq, b_eq = A[eq], problem.l[eq]
        constraints.append(
            {"type": "eq", "fun": lambda x: A_eq @ x - b_eq, "jac": lambda x: A_eq}
        )
    if lo.any() or up.any():
        A_in = np.vstack([A[lo], -A[up]])
        b_in = np.concatenate([problem.l[lo], -problem.u[up]])
        constraints.append(
            {"type": "ineq", "fun": lambda x: A_in @ x - b_in, "jac": lambda x: A_in}
        )

    x_start = np.zeros(problem.n) if x0 is None else np.asarray(x0, dtype=float)
    res = optimize.minimize(
        lambda x: 0.5 * x @ P @ x + q @ x,
        x_start,
        jac=lambda x: P @ x + q,
        method="SLSQP",
        constraints=constraints,
        options={"ftol": 1e-12, "maxiter": 2000},
    )
    x = np.asarray(res.x, dtype=float)
    Ax = A @ x
    pri = float(np.max(np.concatenate([[0.0], Ax - problem.u, problem.l - Ax])))
    status = "optimal" if res.success and pri < 1e-6 else "infeasible" if res.status == 4 else "max-iter"
    return QpResult(
        x=x,
        y=np.full(problem.m, np.nan),
        status=status,
        pri_res=pri,
        dua_res=np.nan,
        iterations=int(res.nit),
        objective=problem.objective(x),
        info={"message": str(res.message)},
    )


# %%
def dump_qp(problem, out_dir, prefix="qp"):
    """Write a QpProblem to text files for debugging.

    P and A are written in MatrixMarket format, q, l, u as one
    value per line.

    Returns
    -------
    dict
        mapping of component name to written path
    """
    if not os.path.exists(out_dir):
        os.makedirs(out_dir)
    out_files = {}
    for name, mat in (("P", problem.P), ("A", problem.A)):
        path = os.path.join(out_dir, f"{prefix}_{name}.mtx")
        mmwrite(path, mat)
        out_files[name] = path
    for name, vec in (("q", problem.q), ("l", problem.l), ("u", problem.u)):
        path = os.path.join(out_dir, f"{prefix}_{name}.txt")
        np.savetxt(path, vec)
        out_files[name] = path
    return out_files

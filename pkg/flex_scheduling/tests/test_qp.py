"""Tests for the QP contract, OSQP backend and dense oracle."""

# %%
import os
import numpy as np
import pytest
from scipy import sparse
from flex_scheduling.resources.optimize import qp
from flex_scheduling.tests.conftest import random_psd


# %%
def _random_problem(seed, n=5):
    """Box-constrained PSD QP with one equality row."""
    rng = np.random.default_rng(seed)
    P = random_psd(rng, n)
    q = rng.normal(size=n)
    A = sparse.vstack([sparse.identity(n), sparse.csr_matrix(np.ones((1, n)))])
    l = np.concatenate([-np.ones(n), [0.5]])
    u = np.concatenate([np.ones(n), [0.5]])
    return qp.QpProblem(P, q, A, l, u)


def test_check_psd_rejects_indefinite():
    with pytest.raises(qp.NonConvexError):
        qp.check_psd(sparse.csc_matrix([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(qp.NonConvexError):
        qp.check_psd(sparse.diags([1.0, -1.0]))
    with pytest.raises(qp.NonConvexError):
        qp.check_psd(sparse.csc_matrix([[1.0, 0.5], [0.0, 1.0]]))
    qp.check_psd(sparse.csc_matrix([[1.0, 1.0], [1.0, 1.0]]))


def test_problem_validation():
    with pytest.raises(ValueError, match="lower bound"):
        qp.QpProblem(sparse.identity(1), [0.0], sparse.identity(1), [1.0], [0.0])
    with pytest.raises(ValueError):
        qp.QpProblem(sparse.identity(2), [0.0], sparse.identity(1), [0.0], [1.0])


@pytest.mark.parametrize("seed", range(10))
def test_osqp_matches_dense_oracle(seed):
    problem = _random_problem(seed)
    result = qp.solve_qp(problem)
    oracle = qp.solve_qp_dense(problem)
    assert result.optimal
    assert oracle.optimal
    assert abs(result.objective - oracle.objective) < 1e-6
    residuals = qp.kkt_residuals(problem, result.x, result.y)
    assert residuals["primal"] < 1e-6
    assert residuals["dual"] < 1e-5


def test_warm_start_from_solution():
    problem = _random_problem(11)
    cold = qp.solve_qp(problem)
    warm = qp.solve_qp(problem, warm_start=(cold.x, cold.y))
    assert warm.optimal
    assert warm.iterations <= cold.iterations
    np.testing.assert_allclose(warm.x, cold.x, atol=1e-6)


def test_warm_start_ignores_mismatched_dimensions():
    problem = _random_problem(12)
    result = qp.solve_qp(problem, warm_start=(np.zeros(2), np.zeros(3)))
    assert result.optimal


def test_infeasible_problem_raises():
    problem = qp.QpProblem(
        sparse.csc_matrix((1, 1)),
        [1.0],
        sparse.csc_matrix([[1.0], [1.0]]),
        [1.0, -np.inf],
        [np.inf, 0.0],
    )
    result = qp.solve_qp(problem)
    assert result.status == "infeasible"
    with pytest.raises(qp.InfeasibleError):
        qp.require_optimal(result, "toy")


def test_iteration_cap_reports_status():
    problem = _random_problem(13, n=8)
    result = qp.solve_qp(problem, qp.QpSettings(max_iter=1, polish=False))
    assert result.status in ("max-iter", "optimal")
    if result.status == "max-iter":
        with pytest.raises(qp.SolverError):
            qp.require_optimal(result, "capped")


def test_dense_fallback_size_limit():
    n = qp.DENSE_MAX_VARS + 1
    problem = qp.QpProblem(
        sparse.identity(n), np.zeros(n), sparse.identity(n), -np.ones(n), np.ones(n)
    )
    with pytest.raises(ValueError):
        qp.solve_qp_dense(problem)


def test_dump_qp(tmp_path):
    files = qp.dump_qp(_random_problem(14), tmp_path, prefix="toy")
    assert set(files) == {"P", "A", "q", "l", "u"}
    assert all(os.path.exists(path) for path in files.values())
    np.testing.assert_allclose(np.loadtxt(files["l"])[-1], 0.5)


def test_result_reports_residuals():
    result = qp.solve_qp(_random_problem(14))
    assert result.optimal
    assert np.isfinite(result.pri_res) and result.pri_res <= 1e-6
    assert np.isfinite(result.dua_res) and result.dua_res <= 1e-5
    assert result.iterations >= 1


@pytest.mark.parametrize("seed", range(5))
def test_duals_certify_active_rows(seed):
    problem = _random_problem(seed)
    result = qp.solve_qp(problem)
    assert result.optimal
    assert qp.kkt_residuals(problem, result.x, result.y)["complementarity"] <= 1e-6
    # rows with a nonzero dual sit on a bound
    Ax = problem.A @ result.x
    active = np.abs(result.y) > 1e-6
    on_bound = np.minimum(np.abs(Ax - problem.l), np.abs(Ax - problem.u)) <= 1e-6
    assert np.all(on_bound[active])


@pytest.mark.parametrize("factor", [0.1, 10.0])
def test_objective_scaling_keeps_argmin(factor):
    problem = _random_problem(21)
    scaled = qp.QpProblem(factor * problem.P, factor * problem.q, problem.A, problem.l, problem.u)
    base = qp.solve_qp(problem)
    again = qp.solve_qp(scaled)
    assert base.optimal and again.optimal
    np.testing.assert_allclose(again.x, base.x, atol=1e-6)

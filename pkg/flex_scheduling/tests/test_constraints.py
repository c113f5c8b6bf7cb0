"""Tests for local prosumer constraint assembly."""

# %%
import numpy as np
from dataclasses import replace
from scipy import sparse
from flex_scheduling.resources.market.timegrid import TimeGrid
from flex_scheduling.resources.optimize import qp
from flex_scheduling.resources.prosumer import constraints as cons
from flex_scheduling.resources.prosumer.pool import ev_bounds, make_prosumer


# %%
def _window(size=4, **kwargs):
    fields = {
        "prosumer_id": "p0",
        "mode": "rt",
        "slots": range(size),
        "dt": 0.25,
        "load": np.ones(size),
        "pv": np.zeros(size),
        "ev_star": np.zeros(size),
        "g_star": np.ones(size),
        "ev_lo": np.zeros(size),
        "ev_hi": np.full(size, 6.6),
        "cum_lo": np.zeros(size),
        "cum_hi": np.full(size, 100.0),
        "e_past": 0.0,
        "g_lo": -10.0,
        "g_hi": 10.0,
        "eta": 0.9,
    }
    fields.update(kwargs)
    return cons.LocalWindow(**fields)


def test_cumulation_matrix_prefix_sums():
    vec = np.random.default_rng(0).normal(size=7)
    np.testing.assert_allclose(cons.cumulation_matrix(7) @ vec, np.cumsum(vec))


def test_balance_zero_point_when_schedule_matches():
    win = _window()
    rows = cons.build_power_balance(win)
    assert rows.violation(np.zeros(win.n_vars)) == 0.0


def test_balance_forces_grid_on_load_jump():
    win = _window(load=np.array([2.0, 1.0, 1.0, 1.0]))
    rows = cons.build_power_balance(win)
    # dEV - dG = S + G* - L - EV* = -1 on the first slot
    np.testing.assert_allclose(rows.l, [-1.0, 0.0, 0.0, 0.0])
    x = np.zeros(win.n_vars)
    x[win.size] = 1.0
    assert rows.violation(x) == 0.0


def test_grid_limits():
    win = _window(g_star=np.full(4, 9.0))
    rows = cons.build_grid_limits(win)
    np.testing.assert_allclose(rows.u, np.ones(4))
    at_cap = cons.build_grid_limits(_window(g_star=np.full(4, 10.0)))
    np.testing.assert_allclose(at_cap.u, np.zeros(4))


def test_ev_power_forces_zero_when_unplugged():
    win = _window(ev_hi=np.array([0.0, 6.6, 6.6, 0.0]), ev_star=np.array([0.0, 6.6, 2.0, 0.0]))
    rows = cons.build_ev_power(win)
    np.testing.assert_allclose(rows.l, [0.0, -6.6, -2.0, 0.0])
    np.testing.assert_allclose(rows.u, [0.0, 0.0, 4.6, 0.0])


def test_ev_energy_one_slot():
    win = _window(size=1, ev_star=np.array([4.0]), cum_lo=np.array([0.5]), cum_hi=np.array([1.0]))
    rows = cons.build_ev_energy(win)
    # baseline eta * dt * 4 kW = 0.9 kWh
    np.testing.assert_allclose(rows.l, [0.5 - 0.9])
    np.testing.assert_allclose(rows.u, [1.0 - 0.9])
    assert rows.violation(np.zeros(2)) == 0.0


def test_ev_energy_uses_past_energy():
    win = _window(e_past=2.0, cum_lo=np.full(4, 2.5), cum_hi=np.full(4, 3.0))
    rows = cons.build_ev_energy(win)
    assert rows.violation(np.zeros(win.n_vars)) > 0.0
    x = np.zeros(win.n_vars)
    x[0] = 0.75 / (0.9 * 0.25)
    assert rows.violation(x) < 1e-12


def test_assembly_is_linear_in_schedule():
    base = _window(g_star=np.zeros(4))
    ev_star = np.array([1.0, 2.0, 0.0, 3.0])
    g_star = np.array([0.5, -1.0, 2.0, 1.0])
    once = replace(base, ev_star=ev_star, g_star=g_star)
    twice = replace(base, ev_star=2 * ev_star, g_star=2 * g_star)
    for r0, r1, r2 in zip(cons.build_local(base), cons.build_local(once), cons.build_local(twice)):
        assert (r1.A != r2.A).nnz == 0
        np.testing.assert_allclose(r2.l - r0.l, 2 * (r1.l - r0.l))
        np.testing.assert_allclose(r2.u - r0.u, 2 * (r1.u - r0.u))


def test_zero_deviation_feasible_for_da_schedule():
    grid = TimeGrid(hours=6, horizon_hours=2)
    plugged = np.array([False, True, True, True, False, False])
    ev = ev_bounds(plugged, 6.0, 6.6, 0.9)
    prosumer = make_prosumer("p0", np.full(6, 1.2), np.array([0, 0, 1, 2, 1, 0.0]), ev, grid)
    ev_star = np.array([0.0, 3.0, 1.0, 6.0 / 0.9 - 4.0, 0.0, 0.0])
    g_star = prosumer.load_da - prosumer.pv_da + ev_star
    A, l, u = cons.stack_rows(cons.build_local(cons.da_window(prosumer, grid)))
    x_da = np.concatenate([ev_star, g_star])
    assert np.all(A @ x_da >= l - 1e-9) and np.all(A @ x_da <= u + 1e-9)

    for hour in range(grid.hours):
        e_past = 0.9 * ev_star[:hour].sum()
        win = cons.rt_window(prosumer, grid, hour, ev_star, g_star, e_past)
        for rows in cons.build_local(win):
            assert rows.violation(np.zeros(win.n_vars)) < 1e-9, (hour, rows.family)

    report = cons.check_day_feasibility(
        prosumer, grid, ev_star, g_star, np.zeros(grid.rt_len), np.zeros(grid.rt_len)
    )
    assert max(report.values()) < 1e-9


def test_rt_window_observes_first_hour_only():
    grid = TimeGrid(hours=4, horizon_hours=2)
    load_rt = np.arange(16, dtype=float)
    prosumer = make_prosumer("p0", np.ones(4), np.zeros(4), None, grid, load_rt=load_rt)
    win = cons.rt_window(prosumer, grid, 1, np.zeros(4), np.ones(4), 0.0)
    assert win.slots == range(4, 12)
    np.testing.assert_allclose(win.load, [4, 5, 6, 7, 1, 1, 1, 1])


def test_projection_restores_pinned_target():
    win = _window(cum_lo=np.array([0.0, 0.0, 0.0, 0.9]), cum_hi=np.array([100.0, 100.0, 100.0, 0.9]))
    drifted = np.ones(4) + 1e-6
    rows = cons.build_ev_energy(win)
    assert rows.violation(np.concatenate([drifted, np.zeros(4)])) > 1e-7

    path = cons.project_ev_path(win, drifted)
    assert rows.violation(np.concatenate([path, np.zeros(4)])) < 1e-12
    assert np.max(np.abs(path - drifted)) < 1e-5
    assert np.all(path >= win.ev_lo) and np.all(path <= win.ev_hi)


def test_projection_respects_grid_box():
    win = _window(g_hi=2.0, cum_hi=np.full(4, 100.0))
    path = cons.project_ev_path(win, np.array([1.5, 0.5, 3.0, 0.0]))
    np.testing.assert_allclose(path, [1.0, 0.5, 1.0, 0.0])


def test_projection_reports_unreachable_target():
    win = _window(ev_hi=np.full(4, 0.5), cum_lo=np.array([0.0, 0.0, 0.0, 0.9]))
    assert cons.project_ev_path(win, np.full(4, 0.5)) is None


def test_loose_power_bounds_carry_no_dual():
    rng = np.random.default_rng(4)
    win = _window()
    target = rng.uniform(0.5, 1.5, 4)
    A, l, u = cons.stack_rows(cons.build_local(win))
    P = sparse.diags(np.concatenate([np.ones(4), np.zeros(4)]))
    q = -np.concatenate([target, np.zeros(4)])
    result = qp.solve_qp(qp.QpProblem(P, q, A, l, u))
    assert result.optimal
    np.testing.assert_allclose(result.x[:4], target, atol=1e-6)
    # rows ordered balance, grid, ev_power, ev_energy
    power_duals = result.y[8:12]
    np.testing.assert_allclose(power_duals, 0.0, atol=1e-6)

"""Tests for imbalance pricing and the real-time deviation problem."""

# %%
import itertools
import numpy as np
import pytest
from flex_scheduling.resources.optimize import real_time as rt
from flex_scheduling.resources.optimize.qp import InfeasibleError, QpResult, solve_qp
from flex_scheduling.resources.prosumer.constraints import LocalWindow
from flex_scheduling.resources.prosumer.pool import FleetSpec
from flex_scheduling.tests.conftest import day_inputs, random_psd, scaled_pool

GERMANY = rt.ImbalanceRegime(10.0, 50.0, "germany")
UK = rt.ImbalanceRegime(30.0, 30.0, "uk")
CAISO = rt.ImbalanceRegime()


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
        "ev_hi": np.zeros(size),
        "cum_lo": np.zeros(size),
        "cum_hi": np.zeros(size),
        "e_past": 0.0,
        "g_lo": -10.0,
        "g_hi": 10.0,
        "eta": 0.9,
    }
    fields.update(kwargs)
    return LocalWindow(**fields)


def _problem(windows, p_window=None, p_da_up=None, lambda_rt=0.0, c_rt=None, regime=CAISO):
    size = windows[0].size
    return rt.RtProblem(
        hour=0,
        windows=windows,
        p_window=np.full(size, 40.0) if p_window is None else p_window,
        p_da_up=np.full(size, 30.0) if p_da_up is None else p_da_up,
        lambda_rt=lambda_rt,
        c_rt=np.eye(size) if c_rt is None else c_rt,
        regime=regime,
    )


# %%
def test_regime_validation():
    rt.ImbalanceRegime(0.0, 0.0, "caiso")
    with pytest.raises(ValueError):
        rt.ImbalanceRegime(1.0, 1.0, "caiso")
    with pytest.raises(ValueError):
        rt.ImbalanceRegime(10.0, 20.0, "uk")
    with pytest.raises(ValueError):
        rt.ImbalanceRegime(20.0, 20.0, "germany")
    with pytest.raises(ValueError):
        rt.ImbalanceRegime(-1.0, 5.0, "germany")
    with pytest.raises(ValueError):
        rt.ImbalanceRegime(mode="texas")


@pytest.mark.parametrize(
    "p_rt, dg, case, charge",
    [
        (40.0, 4000.0, "case_1", 50.0),
        (40.0, -4000.0, "case_2", -10.0),
        (20.0, 4000.0, "case_3", -10.0),
        (20.0, -4000.0, "case_4", 50.0),
        (-10.0, 4000.0, "case_3", -10.0),
        (-10.0, -4000.0, "case_4", 50.0),
    ],
)
def test_imbalance_cases(p_rt, dg, case, charge):
    # 4000 kW over a quarter hour is 1 MWh
    total, breakdown = rt.imbalance_cost([dg], [p_rt], [30.0], GERMANY)
    assert total == pytest.approx(charge)
    assert getattr(breakdown, case) == pytest.approx(charge)
    others = {"case_1", "case_2", "case_3", "case_4"} - {case}
    assert all(getattr(breakdown, name) == 0.0 for name in others)

    zero, _ = rt.imbalance_cost([dg], [p_rt], [30.0], CAISO)
    assert zero == 0.0


def test_imbalance_tie_is_free():
    total, breakdown = rt.imbalance_cost([4000.0, -4000.0], [30.0, 30.0], [30.0, 30.0], GERMANY)
    assert total == 0.0
    assert breakdown.as_dict()["total"] == 0.0


def test_imbalance_matches_collapsed_form():
    rng = np.random.default_rng(7)
    dg = rng.normal(scale=50.0, size=40)
    p_rt = rng.uniform(-20.0, 80.0, 40)
    p_da = rng.uniform(10.0, 60.0, 40)
    total, _ = rt.imbalance_cost(dg, p_rt, p_da, GERMANY)
    sign = rt.system_sign(p_rt, p_da)
    energy = dg * 0.25e-3
    collapsed = np.sum(10.0 * sign * energy + 40.0 * np.maximum(sign * energy, 0.0))
    assert total == pytest.approx(collapsed)


def test_imbalance_length_mismatch():
    with pytest.raises(ValueError):
        rt.imbalance_cost([1.0, 2.0], [30.0], [30.0], UK)


def test_problem_validation():
    win = _window()
    with pytest.raises(ValueError):
        _problem([win], p_window=np.full(3, 40.0))
    with pytest.raises(ValueError):
        _problem([win], lambda_rt=-1.0)
    with pytest.raises(ValueError):
        _problem([win, _window(size=5)])


# %%
def _oracle_problem(seed):
    """One prosumer, four slots, dEV in [-0.2, 0.2] with sum in [-0.2, 0]."""
    rng = np.random.default_rng(seed)
    offset = 0.05 * rng.integers(-6, 7, 4)
    baseline = 0.9 * 0.25 * 4
    win = _window(
        load=2.0 + offset,
        ev_star=np.ones(4),
        g_star=np.full(4, 3.0),
        ev_lo=np.full(4, 0.8),
        ev_hi=np.full(4, 1.2),
        cum_lo=np.array([0.0, 0.0, 0.0, baseline - 0.9 * 0.25 * 0.2]),
        cum_hi=np.array([100.0, 100.0, 100.0, baseline]),
    )
    regime = [CAISO, UK, GERMANY][rng.integers(0, 3)]
    return _problem(
        [win],
        p_window=rng.uniform(-20.0, 80.0, 4),
        p_da_up=rng.uniform(10.0, 60.0, 4),
        lambda_rt=float(rng.choice([0.0, 1.0, 10.0])),
        c_rt=random_psd(rng, 4, scale=400.0),
        regime=regime,
    ), offset


def _grid_search(problem, offset):
    values = np.round(np.arange(-0.2, 0.2 + 1e-9, 0.05), 10)
    dev = np.array(list(itertools.product(values, repeat=4)))
    total = dev.sum(axis=1)
    dev = dev[(total >= -0.2 - 1e-9) & (total <= 1e-9)]
    energy = (offset + dev) * 0.25e-3
    price = energy @ problem.p_window
    risk = 0.5 * problem.lambda_rt * np.einsum("ki,ij,kj->k", energy, problem.c_rt, energy)
    sign = np.sign(problem.p_window - problem.p_da_up)
    up = np.maximum(energy, 0.0)
    down = np.maximum(-energy, 0.0)
    plus, minus = problem.regime.delta_plus, problem.regime.delta_minus
    short = (sign > 0).astype(float)
    long = (sign < 0).astype(float)
    imbalance = (short * (minus * up - plus * down) + long * (minus * down - plus * up)).sum(axis=1)
    return float(np.min(price + risk + imbalance))


@pytest.mark.parametrize("seed", range(50))
def test_matches_grid_search(seed):
    problem, offset = _oracle_problem(seed)
    solution = rt.solve_rt_step(problem)
    best = _grid_search(problem, offset)
    assert solution.objective <= best + 1e-7
    assert solution.objective == pytest.approx(best, abs=1e-5)
    assert solution.epigraph_gap < 1e-6
    assert solution.slack_kwh == 0.0


def test_load_jump_lands_on_grid():
    win = _window(load=np.array([2.0, 1.0, 1.0, 1.0]))
    solution = rt.solve_rt_step(_problem([win], regime=GERMANY))
    np.testing.assert_allclose(solution.dg_total, [1.0, 0.0, 0.0, 0.0], atol=1e-9)
    # system short on every slot: 1 kW for a quarter hour pays 40 + 50 $/MWh
    assert solution.objective == pytest.approx(0.25e-3 * 90.0, rel=1e-6)


def test_zero_deviation_without_flexibility(reference_day, day_grid):
    pool = scaled_pool(reference_day, 3, seed=2, grid=day_grid, rt_noise=0.0, fleet_spec=FleetSpec(ev_share=0.0))
    inputs = day_inputs(reference_day, day_grid, pool)
    e_past = np.zeros(len(pool))
    for hour in (0, 12, 23):
        problem = rt.build_rt_problem(
            hour, day_grid, pool, inputs.ev_star, inputs.g_star, e_past, inputs.p_rt,
            inputs.p_rt_hat, inputs.p_da, 1.0, inputs.c_rt_template, GERMANY,
        )
        solution = rt.solve_rt_step(problem)
        np.testing.assert_allclose(solution.dev_g, 0.0, atol=1e-9)
        assert solution.objective == pytest.approx(0.0, abs=1e-12)


def test_step_never_worse_than_following_schedule(reference_day, day_grid):
    pool = scaled_pool(reference_day, 3, seed=2, grid=day_grid, rt_noise=0.0)
    inputs = day_inputs(reference_day, day_grid, pool)
    etas = np.array([p.eta for p in pool])
    for hour in (9, 14):
        e_past = etas * inputs.ev_star[:, :hour].sum(axis=1)
        problem = rt.build_rt_problem(
            hour, day_grid, pool, inputs.ev_star, inputs.g_star, e_past, inputs.p_rt,
            inputs.p_rt_hat, inputs.p_da, 1.0, inputs.c_rt_template, UK,
        )
        assert rt.solve_rt_step(problem).objective <= 1e-9


def test_slack_repairs_energy_bounds():
    # EV pinned by its energy bounds; the realized load jump exceeds grid headroom
    baseline = 0.9 * 0.25 * 4.0 * np.arange(1, 5)
    win = _window(
        load=np.full(4, 4.0),
        ev_star=np.full(4, 4.0),
        g_star=np.full(4, 5.0),
        ev_hi=np.full(4, 6.6),
        cum_lo=baseline,
        cum_hi=baseline,
        g_hi=6.0,
    )
    solution = rt.solve_rt_step(_problem([win], regime=UK))
    assert solution.slack_kwh > 0.0
    np.testing.assert_allclose(solution.dev_ev, -2.0, atol=1e-6)
    np.testing.assert_allclose(solution.dev_g, 1.0, atol=1e-6)


def test_infeasible_without_ev_raises():
    win = _window(load=np.full(4, 8.0), g_star=np.full(4, 5.0), g_hi=6.0)
    with pytest.raises(InfeasibleError):
        rt.solve_rt_step(_problem([win]))


def test_risk_term_non_increasing_in_lambda(small_pool, small_inputs, day_grid):
    inputs = small_inputs
    etas = np.array([p.eta for p in small_pool])
    hour = 10
    e_past = etas * inputs.ev_star[:, :hour].sum(axis=1)
    quad = []
    for lambda_rt in (0.0, 1.0, 10.0, 100.0):
        problem = rt.build_rt_problem(
            hour, day_grid, small_pool, inputs.ev_star, inputs.g_star, e_past, inputs.p_rt,
            inputs.p_rt_hat, inputs.p_da, lambda_rt, inputs.c_rt_template, CAISO,
        )
        energy = rt.solve_rt_step(problem).dg_total * problem.energy_scale
        quad.append(energy @ problem.c_rt @ energy)
    for prev, curr in zip(quad, quad[1:]):
        assert curr <= prev * (1 + 1e-5) + 1e-8


def test_build_rt_problem_uses_realized_first_hour(small_pool, small_inputs, day_grid):
    inputs = small_inputs
    problem = rt.build_rt_problem(
        5, day_grid, small_pool, inputs.ev_star, inputs.g_star, np.zeros(len(small_pool)),
        inputs.p_rt, inputs.p_rt_hat, inputs.p_da, 1.0, inputs.c_rt_template, CAISO,
    )
    assert problem.slots == range(20, 32)
    np.testing.assert_array_equal(problem.p_window[:4], inputs.p_rt[20:24])
    np.testing.assert_array_equal(problem.p_window[4:], inputs.p_rt_hat[24:32])
    np.testing.assert_array_equal(problem.p_da_up, np.repeat(inputs.p_da[5:8], 4))
    assert problem.n_implemented == 4


@pytest.mark.parametrize("hour", [10, 21])
def test_shift_warm_start_matches_next_layout(small_pool, small_inputs, day_grid, hour):
    inputs = small_inputs
    etas = np.array([p.eta for p in small_pool])

    def problem_at(h):
        e_past = etas * inputs.ev_star[:, :h].sum(axis=1)
        return rt.build_rt_problem(
            h, day_grid, small_pool, inputs.ev_star, inputs.g_star, e_past, inputs.p_rt,
            inputs.p_rt_hat, inputs.p_da, 1.0, inputs.c_rt_template, GERMANY,
        )

    previous = rt.solve_rt_step(problem_at(hour))
    following = problem_at(hour + 1)
    x0, y0 = rt.shift_warm_start(previous, following)
    qp, _ = rt.assemble_rt(following)
    assert x0.shape == qp.q.shape
    assert y0.shape == qp.l.shape

    cold = rt.solve_rt_step(following)
    warm = rt.solve_rt_step(following, warm_start=previous)
    assert warm.objective == pytest.approx(cold.objective, abs=1e-7)
    assert rt.shift_warm_start(None, following) is None


def test_short_slot_never_deviates_up_under_uk():
    # slot 0 short, slot 1 at a tie with the same RT price; 0.2 kW of extra charge is due
    win = _window(
        size=2,
        ev_star=np.ones(2),
        g_star=np.full(2, 2.0),
        ev_lo=np.full(2, 0.6),
        ev_hi=np.full(2, 1.4),
        cum_lo=np.array([0.0, 0.9 * 0.25 * 2.2]),
        cum_hi=np.array([100.0, 0.9 * 0.25 * 2.4]),
    )
    regime = rt.ImbalanceRegime(20.0, 20.0, "uk")
    p_rt, p_da_up = np.array([50.0, 50.0]), np.array([30.0, 50.0])
    solution = rt.solve_rt_step(
        _problem([win], p_window=p_rt, p_da_up=p_da_up, c_rt=np.eye(2), regime=regime)
    )

    values = np.round(np.arange(-0.4, 0.4 + 1e-9, 0.05), 10)
    best = np.inf
    for first, second in itertools.product(values, repeat=2):
        if not 0.2 - 1e-9 <= first + second <= 0.4 + 1e-9:
            continue
        dg = np.array([first, second])
        cost = 0.25e-3 * p_rt @ dg + rt.imbalance_cost(dg, p_rt, p_da_up, regime)[0]
        best = min(best, cost)

    assert solution.objective == pytest.approx(best, abs=1e-8)
    assert solution.dg_total[0] <= 1e-6
    np.testing.assert_allclose(solution.dg_total, [-0.2, 0.4], atol=1e-6)
    assert solution.objective == pytest.approx(0.25e-3 * 6.0, abs=1e-8)


def test_slack_repairs_pinned_energy_drift():
    # power pinned to the schedule, end-of-window energy target 1e-6 kWh above it
    target = 0.9 * 0.25 * 4 + 1e-6
    win = _window(
        ev_star=np.ones(4),
        g_star=np.full(4, 2.0),
        ev_lo=np.ones(4),
        ev_hi=np.ones(4),
        cum_lo=np.array([0.0, 0.0, 0.0, target]),
        cum_hi=np.array([100.0, 100.0, 100.0, target]),
    )
    solution = rt.solve_rt_step(_problem([win], regime=UK))
    assert solution.layout["with_slack"]
    assert 0.0 < solution.slack_kwh <= 1e-5
    np.testing.assert_array_equal(solution.dev_ev, 0.0)
    np.testing.assert_allclose(solution.dev_g, 0.0, atol=1e-12)


def test_stalled_solve_retries_with_slack(monkeypatch):
    calls = []

    def stall_once(problem, settings=None, warm_start=None):
        calls.append(problem.n)
        if len(calls) == 1:
            return QpResult(
                x=np.zeros(problem.n), y=np.zeros(problem.m), status="max-iter",
                pri_res=2e-6, dua_res=1e-2, iterations=50000, objective=np.nan,
            )
        return solve_qp(problem, settings, warm_start)

    monkeypatch.setattr(rt, "solve_qp", stall_once)
    win = _window(load=np.array([2.0, 1.0, 1.0, 1.0]))
    solution = rt.solve_rt_step(_problem([win], regime=GERMANY))
    assert len(calls) == 2 and calls[1] > calls[0]
    assert solution.layout["with_slack"]
    assert solution.slack_kwh == pytest.approx(0.0, abs=1e-7)
    np.testing.assert_allclose(solution.dg_total, [1.0, 0.0, 0.0, 0.0], atol=1e-9)

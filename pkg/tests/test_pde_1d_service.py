import math

import numpy as np
import pytest

from services.errors import AssumptionViolated, DomainError, NoConvergence
from services.model_service import ModelParams, lower_bound_z
from services.pde_1d_service import (
    Grid1D,
    GridSpec1D,
    TerminalSpec,
    build_axis,
    diffusion_banded,
    reaction_flow,
    regime4_spec,
    solve_regime2,
    solve_regime3,
    solve_regime4,
    solve_singular,
    solve_truncated,
    substeps,
)

K_C = 2.0 / 3.0
ELL = -1.4


def test_constant_negative_terminal_reproduces_lower_bound():
    spec = GridSpec1D.centered(nx=400, nt=400)
    grid = solve_truncated(spec, TerminalSpec.constant_neg(K_C), math.inf)
    z = lower_bound_z(ModelParams(p_hat=2.0, k=2.0 * K_C, eta=1.0, V=1.0, sigma=1.0, S0=1.0), 1.0, grid.t)
    assert np.max(np.abs(grid.values - z[:, None])) < 1e-4


def test_all_singular_terminal_converges_to_blowup_profile():
    spec = GridSpec1D.centered(nx=100, nt=200)
    grid = solve_singular(spec, TerminalSpec.all_singular())
    rows = grid.t <= grid.T - 0.05
    scaled = grid.values[rows] * (grid.T - grid.t[rows])[:, None]
    assert np.max(np.abs(scaled - 1.0)) < 2e-3
    cert = grid.certificate
    assert cert.converged and cert.monotone
    assert cert.min_increment >= -1e-9
    assert math.isinf(grid.trunc_level)


def test_schedule_too_short_raises_no_convergence():
    spec = GridSpec1D.centered(nx=60, nt=60)
    with pytest.raises(NoConvergence) as exc:
        solve_singular(spec, TerminalSpec.all_singular(), schedule=(1e1, 1e2), tol=1e-6)
    assert exc.value.trace and exc.value.last_delta > 1e-6


def test_threshold_solution_is_sandwiched_and_monotone_in_x(small_spec):
    grid = solve_singular(small_spec, TerminalSpec.threshold(K_C, ELL))
    params = ModelParams(p_hat=2.0, k=2.0 * K_C, eta=1.0, V=1.0, sigma=1.0, S0=1.0)
    inner = grid.t < grid.T
    z = lower_bound_z(params, 1.0, grid.t[inner])
    upper = 1.0 / (grid.T - grid.t[inner])
    body = grid.values[inner]
    assert np.all(body >= z[:, None] - 1e-9)
    assert np.all(body <= upper[:, None] * (1.0 + 1e-9))
    assert np.all(np.diff(grid.values[0]) >= -1e-9 * np.max(np.abs(grid.values[0])))
    assert ELL in grid.x


def test_truncated_solves_increase_with_level(small_spec):
    terminal = TerminalSpec.threshold(K_C, ELL)
    x = build_axis(small_spec, (ELL,))
    low = solve_truncated(small_spec, terminal, 1e2, floor_level=1e4, x=x)
    high = solve_truncated(small_spec, terminal, 1e4, floor_level=1e4, x=x)
    assert np.all(high.values - low.values >= -1e-12 * (1.0 + np.abs(high.values)))


def test_mollified_terminal_is_a_ramp():
    terminal = TerminalSpec.threshold(K_C, 0.0, mollify_m=2.0)
    x = np.array([-1.0, -0.5, -0.25, 0.0, 1.0])
    vals = terminal.evaluate(x, 10.0)
    assert vals[0] == pytest.approx(-K_C)
    assert vals[2] == pytest.approx(-K_C + (10.0 + K_C) * 0.5)
    assert vals[3] == 10.0 and vals[4] == 10.0


def test_custom_terminal_below_lower_level_is_rejected():
    with pytest.raises(DomainError):
        TerminalSpec.custom([-1.0, 0.0], K_c=0.5)


def test_exact_reaction_flow():
    out = reaction_flow(np.array([2.0, -2.0, 0.0]), np.ones(3), 2.0, 0.1)
    assert out[0] == pytest.approx(1.0 / 0.6)
    assert out[1] == pytest.approx(-2.5)
    assert out[2] == 0.0
    with pytest.raises(AssumptionViolated):
        reaction_flow(np.array([-2.0]), np.ones(1), 2.0, 0.6)


def test_implicit_diffusion_keeps_constants():
    from scipy.linalg import solve_banded

    x = np.sort(np.concatenate([np.linspace(-3.0, 3.0, 40), [0.123]]))
    ab = diffusion_banded(x, np.ones_like(x), 0.01)
    out = solve_banded((1, 1), ab, np.full(x.size, 3.5))
    assert np.allclose(out, 3.5, atol=1e-13)


def test_substeps_cover_the_interval_and_shrink_near_the_horizon():
    steps = substeps(1.0, 0.9, 1.0, 0.25, 1e-6)
    assert sum(steps) == pytest.approx(0.1, abs=1e-14)
    assert min(steps) >= 1e-6 * 0.5
    far = substeps(0.5, 0.4, 1.0, 0.25, 1e-6)
    assert len(far) < len(steps)


def test_rate_table_of_blowup_solution_is_one(r0_grid):
    table = r0_grid.rate_table()
    assert np.allclose(table, 1.0, atol=1e-6)
    assert r0_grid.rate_weight_at(0.5, 0.3) == pytest.approx(1.0, abs=1e-6)


def test_value_at_nodes_and_clamping(r0_grid):
    j, i = 37, 11
    assert r0_grid.value_at(r0_grid.t[j], r0_grid.x[i]) == pytest.approx(r0_grid.values[j, i])
    assert r0_grid.value_at(0.0, 1e3) == pytest.approx(r0_grid.values[0, -1])


def test_stop_at_hit_value_has_wall(small_spec):
    grid = solve_regime2(small_spec, K_C, ELL)
    assert grid.x[0] == ELL
    assert np.all(grid.values[:, 0] == -K_C)
    assert np.all(grid.values[-1, 1:] > 1e5)


def test_stop_at_hit_needs_threshold_inside_domain(small_spec):
    with pytest.raises(DomainError):
        solve_regime2(small_spec, K_C, -10.0)


def test_pause_below_stages_match_at_the_split(small_spec):
    delta = 0.2
    u_inf, v = solve_regime3(small_spec, K_C, ELL, delta)
    assert u_inf.t[0] == pytest.approx(1.0 - delta)
    assert v.t[-1] == pytest.approx(1.0 - delta)
    assert v.terminal_time == 1.0
    split = v.values[-1]
    below = v.x <= ELL
    assert np.all(split[below] == -K_C)
    above = np.flatnonzero(v.x > ELL)
    assert np.allclose(split[above], u_inf.value_at(u_inf.t[0], v.x[above]), rtol=1e-12)


def test_pause_below_with_full_buffer_is_single_level(small_spec):
    u_inf, v = solve_regime3(small_spec, K_C, ELL, 1.0)
    assert v.t.size == 1
    assert v.t[0] == 0.0


@pytest.fixture(scope="module")
def recursion():
    spec = GridSpec1D.centered(nx=120, nt=160)
    return spec, solve_regime4(spec, K_C, ELL, 0.2, 0.2, n_switches=6)


def test_recursion_starts_from_stop_at_hit_solution(recursion):
    spec, state = recursion
    direct = solve_regime2(regime4_spec(spec, ELL, 0.2, 0.2), K_C, ELL)
    assert np.array_equal(state.u1[0].values, direct.values)
    assert np.array_equal(state.u1[0].x, direct.x)


def test_recursion_shares_the_terminal_slab(recursion):
    _, state = recursion
    j_split = int(np.argmin(np.abs(state.u1[0].t - 0.8)))
    for level in state.u1[1:]:
        assert np.array_equal(level.values[j_split:], state.u1[0].values[j_split:])
    for paused in state.u0:
        assert np.all(paused.values[-1][:-1] == -K_C)


def test_recursion_is_non_increasing_nodewise(recursion):
    _, state = recursion
    assert state.n == 6
    assert state.reentry == "optional"
    for upper, lower in zip(state.u1, state.u1[1:]):
        assert np.all(lower.values <= upper.values + 1e-10)
    assert state.direction in ("non_increasing", "constant")


def test_recursion_increments_shrink(recursion):
    _, state = recursion
    assert len(state.increments) == 5
    for before, after in zip(state.increments, state.increments[1:]):
        assert after <= before + 1e-10


def test_optional_reentry_pays_at_most_the_hold_cost(recursion):
    _, state = recursion
    node = state.u1[0].node_index(ELL + 0.2)
    for paused, trading in zip(state.u0, state.u1):
        assert np.all(paused.values <= -K_C + 1e-12)
        resume = trading.values[: paused.t.size, node]
        np.testing.assert_allclose(paused.values[:, -1], np.minimum(resume, -K_C), rtol=0, atol=1e-12)


def test_forced_reentry_takes_the_trading_value(small_spec):
    state = solve_regime4(small_spec, K_C, ELL, 0.2, 0.2, n_switches=3, reentry="forced")
    assert state.reentry == "forced"
    assert state.direction in ("constant", "non_increasing", "non_decreasing", "mixed")
    node = state.u1[0].node_index(ELL + 0.2)
    for paused, trading in zip(state.u0, state.u1):
        np.testing.assert_allclose(paused.values[:, -1], trading.values[: paused.t.size, node], rtol=0, atol=1e-12)


def test_recursion_rejects_unknown_reentry(small_spec):
    with pytest.raises(DomainError):
        solve_regime4(small_spec, K_C, ELL, 0.2, 0.2, reentry="sometimes")


def test_open_ended_recursion_stops_on_tolerance(small_spec):
    state = solve_regime4(small_spec, K_C, ELL, 0.2, 0.2, n_switches=None, max_switches=30)
    assert state.n < 30
    assert state.increments[-1] < 1e-3


def test_recursion_rejects_non_positive_buffer(small_spec):
    with pytest.raises(DomainError):
        solve_regime4(small_spec, K_C, ELL, 0.2, 0.0)


def test_grid_axes(r0_grid):
    assert isinstance(r0_grid, Grid1D)
    assert r0_grid.nt == 200
    assert r0_grid.nx == 100
    assert r0_grid.terminal_time == 1.0

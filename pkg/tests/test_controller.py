import math

import numpy as np
import pytest

from src.lqtrack.coefficients import RandomUniformSpec, RandomWalkSpec
from src.lqtrack.controller import (
    _inf_weighted,
    continuum_liquidation_path,
    decompose_costs,
    deterministic_feedback_path,
    evaluate_J_c,
    evaluate_J_eta,
    evaluate_J_n,
    liquidation_residual,
    optimal_value_formula,
    perturbed_policies,
    simulate_feedback,
    table_policy,
    terminal_miss,
)
from src.lqtrack.errors import LatticeError
from src.lqtrack.oracle import DPMode, dp_solve
from src.lqtrack.riccati import solve_discrete_bsrde, solve_minimal_limit

from tests.conftest import COTH_1, make_problem, solved


def test_inf_weight_times_zero_gap_is_zero():
    out = _inf_weighted(np.array([math.inf, 2.0, math.inf]), np.array([0.0, 3.0, 1.0]), 1e-9)
    assert out.tolist() == [0.0, 18.0, math.inf]


def test_feedback_liquidates_in_proportion_to_L(liquidation):
    tree, coeffs = liquidation
    sol, l, _, fb = solved(tree, coeffs)
    residual = liquidation_residual(fb, sol, l)
    assert residual["state"] <= 1e-12
    assert residual["control"] <= 1e-12
    assert terminal_miss(fb, coeffs) <= 1e-12
    assert fb.step_residual() <= 1e-14


def test_liquidation_cost_is_c0_x0_squared(liquidation):
    tree, coeffs = liquidation
    sol, _, signal, fb = solved(tree, coeffs)
    costs = decompose_costs(fb, sol, signal, coeffs, tree)
    expected = sol.root_value * coeffs.x0 ** 2
    assert costs.J_c.value == pytest.approx(expected, rel=1e-11)
    assert costs.J_eta.feasible
    assert costs.J_eta.value == pytest.approx(costs.J_c.value, rel=1e-9)
    assert optimal_value_formula(sol, signal, coeffs.x0, tree).total == pytest.approx(expected, rel=1e-12)


def test_feedback_decomposition(mixed):
    tree, coeffs = mixed
    sol, _, signal, fb = solved(tree, coeffs)
    costs = decompose_costs(fb, sol, signal, coeffs, tree, truncation_levels=(1.0, 100.0))
    assert costs.mismatch == 0.0
    assert costs.a_monotonicity_violations == 0
    assert costs.relative_martingale_drift <= 1e-9
    assert costs.decomposition_nonnegative
    value = optimal_value_formula(sol, signal, coeffs.x0, tree).total
    assert costs.J_eta.value == pytest.approx(value, rel=1e-9)
    assert costs.J_c.value <= costs.J_eta.value + 1e-9
    assert costs.J_n[1.0] <= costs.J_n[100.0] <= costs.J_eta.value + 1e-9


def test_cost_gap_equals_mismatch(finite_penalty):
    tree, coeffs = finite_penalty
    sol, _, signal, fb = solved(tree, coeffs)
    base = decompose_costs(fb, sol, signal, coeffs, tree)
    for traj in perturbed_policies(tree, coeffs, sol, signal, count=12, seed=3):
        costs = decompose_costs(traj, sol, signal, coeffs, tree)
        gap = costs.J_c.value - base.J_c.value
        assert costs.mismatch > 0
        assert abs(gap - costs.mismatch) <= 1e-9 * max(1.0, abs(costs.J_c.value))
        assert costs.J_eta.value >= costs.J_c.value - 1e-9
        assert costs.J_eta.value >= base.J_eta.value
        assert costs.a_monotonicity_violations == 0


def test_perturbations_keep_the_constraint(mixed):
    tree, coeffs = mixed
    sol, _, signal, _ = solved(tree, coeffs)
    for traj in perturbed_policies(tree, coeffs, sol, signal, count=8, seed=1):
        assert terminal_miss(traj, coeffs) <= 1e-9
        assert evaluate_J_eta(traj, coeffs, tree).feasible


def test_truncated_feedback_cost_matches_value_formula(finite_penalty):
    tree, coeffs = finite_penalty
    sol, _, signal, fb = solved(tree, coeffs, n=3.0)
    expected = optimal_value_formula(sol, signal, coeffs.x0, tree).total
    assert evaluate_J_n(fb, coeffs, 3.0, tree) == pytest.approx(expected, rel=1e-10)


def test_truncated_costs_increase_with_n(liquidation):
    tree, coeffs = liquidation
    values = []
    for n in (1.0, 10.0, 100.0, 1000.0):
        _, _, _, fb = solved(tree, coeffs, n=n)
        values.append(evaluate_J_n(fb, coeffs, n, tree))
    limit = solve_minimal_limit(tree, coeffs).root_value * coeffs.x0 ** 2
    assert values == sorted(values)
    assert values[-1] <= limit * (1 + 1e-12)


def test_doing_nothing_misses_the_constraint(liquidation):
    tree, coeffs = liquidation
    idle = table_policy(tree, coeffs.x0, [np.zeros(tree.level_size(k)) for k in range(tree.steps)])
    assert np.all(idle.X_T == coeffs.x0)
    cost = evaluate_J_eta(idle, coeffs, tree)
    assert not cost.feasible
    assert cost.witness is not None
    assert cost.max_violation == coeffs.x0


def test_jc_window_ends_at_the_horizon(finite_penalty):
    tree, coeffs = finite_penalty
    sol, _, signal, fb = solved(tree, coeffs)
    short = evaluate_J_c(fb, sol, signal, tree, window=1)
    assert [row["level"] for row in short.to_rows()] == [tree.steps]
    full = evaluate_J_c(fb, sol, signal, tree, window=tree.steps + 1)
    assert len(full.to_rows()) == tree.steps + 1
    assert full.value >= short.value


def test_path_arrays_shape(random_kappa):
    tree, coeffs = random_kappa
    _, _, _, fb = solved(tree, coeffs)
    ids, X, u = fb.path_arrays()
    paths = tree.level_size(tree.steps - 1)
    assert ids.shape == (paths,)
    assert X.shape == (paths, tree.steps + 1)
    assert u.shape == (paths, tree.steps)
    assert np.all(X[:, 0] == coeffs.x0)


def test_simulation_needs_paths():
    tree, coeffs = make_problem(4, recombining=True)
    sol = solve_minimal_limit(tree, coeffs)
    with pytest.raises(LatticeError):
        simulate_feedback(tree, coeffs, sol, None)


def test_continuum_liquidation_path():
    times = np.linspace(0.0, 1.0, 11)
    path = continuum_liquidation_path(1.0, 1.0, math.inf, 1.0, times, 1.0)
    expected = np.sinh(1.0 - times) / math.sinh(1.0)
    assert path[0] == 1.0
    assert path[-1] == 0.0
    assert path[:-1] == pytest.approx(expected[:-1], rel=1e-6)


def test_continuum_path_with_finite_penalty_stops_short():
    times = np.array([0.0, 1.0])
    path = continuum_liquidation_path(1.0, 1.0, 2.0, 1.0, times, 1.0)
    assert 0.0 < path[1] < 1.0


def test_truncated_costs_stop_moving_once_n_exceeds_every_penalty():
    tree, coeffs = make_problem(
        4, xi=0.3, XiT=RandomWalkSpec(initial=0.5, scale=0.4), eta=RandomUniformSpec(low=1.5, high=2.5, seed=4)
    )
    costs = {}
    for n in (1.0, 3.0, 10.0, 100.0):
        sol, _, _, fb = solved(tree, coeffs, n=n)
        costs[n] = (sol.root_value, evaluate_J_n(fb, coeffs, n, tree))
    assert costs[1.0][0] < costs[3.0][0]
    assert costs[3.0] == costs[10.0] == costs[100.0]


def test_level_path_on_a_walk_liquidates_at_c0_x0_squared():
    tree, coeffs = make_problem(64, x0=1.5, recombining=True)
    sol = solve_minimal_limit(tree, coeffs)
    path = deterministic_feedback_path(tree, coeffs, sol, np.zeros(tree.steps))
    assert path.terminal_miss <= 1e-12
    assert path.J == pytest.approx(sol.root_value * 1.5 ** 2, rel=1e-11)
    qv = dp_solve(tree, coeffs, DPMode.CONSTRAINED)
    assert path.J == pytest.approx(qv.root_value(1.5), rel=1e-11)
    assert abs(sol.root_value - COTH_1) <= 3.0 / tree.steps


def test_level_path_matches_tree_feedback():
    tree, coeffs = make_problem(5, xi=0.4, XiT=1.0, eta=2.0, x0=-0.5)
    sol, _, signal, fb = solved(tree, coeffs)
    levels = [float(signal.xi_hat.level(k)[0]) for k in range(tree.steps)]
    path = deterministic_feedback_path(tree, coeffs, sol, levels)
    for k in range(tree.steps):
        assert fb.X.level(k) == pytest.approx(np.full(tree.level_size(k), path.X[k]), rel=1e-12)
    assert path.J == pytest.approx(evaluate_J_eta(fb, coeffs, tree).value, rel=1e-12)


def test_level_path_needs_deterministic_data(random_kappa):
    tree, coeffs = random_kappa
    with pytest.raises(LatticeError):
        deterministic_feedback_path(tree, coeffs, solve_minimal_limit(tree, coeffs), np.zeros(tree.steps))


def test_truncated_walk_costs_close_the_gap_to_the_constraint():
    tree, coeffs = make_problem(64, recombining=True)
    target = dp_solve(tree, coeffs, DPMode.CONSTRAINED).root_value(coeffs.x0)
    values = []
    for n in (1.0, 10.0, 100.0, 1e3, 1e4, 1e6):
        sol = solve_discrete_bsrde(tree, coeffs, n)
        path = deterministic_feedback_path(tree, coeffs, sol, np.zeros(tree.steps))
        assert path.J == pytest.approx(sol.root_value * coeffs.x0 ** 2, rel=1e-10)
        values.append(path.J)
    assert values == sorted(values)
    assert 0.0 <= target - values[-1] <= 1e-6


@pytest.mark.parametrize("steps", [4, 6, 8, 10, 12])
def test_feedback_with_n_tied_to_N_misses_by_at_most_C_over_N(steps):
    tree, coeffs = make_problem(steps)
    _, _, _, fb = solved(tree, coeffs, n=float(steps))
    miss = terminal_miss(fb, coeffs)
    assert 0.0 < miss <= coeffs.x0 / math.sinh(1.0) / steps
    _, _, _, limit_fb = solved(tree, coeffs)
    assert terminal_miss(limit_fb, coeffs) <= 1e-12

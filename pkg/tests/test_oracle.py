import math

import numpy as np
import pytest

from src.lqtrack.coefficients import RandomUniformSpec, RandomWalkSpec
from src.lqtrack.controller import evaluate_J_eta, perturbed_policies
from src.lqtrack.errors import LatticeError, ValidationFailure
from src.lqtrack.oracle import DPMode, compare_policies, dp_grid_search, dp_solve, simulate_oracle

from tests.conftest import make_problem, solved


def test_finite_mode_needs_finite_terminal_weights(liquidation):
    tree, coeffs = liquidation
    with pytest.raises(ValidationFailure):
        dp_solve(tree, coeffs, DPMode.FINITE)
    qv = dp_solve(tree, coeffs, DPMode.FINITE, n=10.0)
    assert qv.truncation == 10.0
    assert not qv.forced.any()


def test_value_functions_are_nonnegative(mixed):
    tree, coeffs = mixed
    for qv in (dp_solve(tree, coeffs, DPMode.CONSTRAINED), dp_solve(tree, coeffs, DPMode.FINITE, 50.0)):
        assert qv.nonnegativity_violation() <= 1e-12


def test_oracle_reaches_the_target(mixed):
    tree, coeffs = mixed
    qv = dp_solve(tree, coeffs, DPMode.CONSTRAINED)
    traj = simulate_oracle(tree, qv, coeffs.x0)
    mask = coeffs.constrained
    assert mask.any()
    assert np.max(np.abs(traj.X_T - coeffs.xi_T)[mask]) <= 1e-12 * max(1.0, float(np.max(np.abs(coeffs.xi_T))))


def test_oracle_matches_feedback(mixed):
    tree, coeffs = mixed
    sol, _, signal, fb = solved(tree, coeffs)
    qv = dp_solve(tree, coeffs, DPMode.CONSTRAINED)
    oracle = simulate_oracle(tree, qv, coeffs.x0)
    cmp = compare_policies(fb, oracle, coeffs)
    u_scale = max(1.0, max(float(np.max(np.abs(fb.u.level(k)))) for k in range(tree.steps)))
    assert cmp.max_control_diff <= 1e-9 * u_scale
    assert abs(cmp.cost_gap) <= 1e-9 * max(1.0, qv.root_value(coeffs.x0))
    assert evaluate_J_eta(oracle, coeffs, tree).value == pytest.approx(qv.root_value(coeffs.x0), rel=1e-9)


def test_oracle_value_is_a_lower_bound(finite_penalty):
    tree, coeffs = finite_penalty
    sol, _, signal, _ = solved(tree, coeffs)
    v0 = dp_solve(tree, coeffs, DPMode.CONSTRAINED).root_value(coeffs.x0)
    for traj in perturbed_policies(tree, coeffs, sol, signal, count=10, seed=5):
        assert evaluate_J_eta(traj, coeffs, tree).value >= v0 - 1e-12


def test_compare_needs_a_shared_tree(liquidation):
    tree, coeffs = liquidation
    other_tree, other_coeffs = make_problem(tree.steps, x0=coeffs.x0)
    a = simulate_oracle(tree, dp_solve(tree, coeffs, DPMode.CONSTRAINED), coeffs.x0)
    b = simulate_oracle(other_tree, dp_solve(other_tree, other_coeffs, DPMode.CONSTRAINED), coeffs.x0)
    with pytest.raises(LatticeError):
        compare_policies(a, b)
    same = compare_policies(a, a, coeffs)
    assert same.max_control_diff == 0.0
    assert same.cost_gap == 0.0


def test_grid_search_agrees_with_quadratic_value():
    tree, coeffs = make_problem(
        3,
        kappa=RandomUniformSpec(low=0.5, high=1.5, seed=21),
        xi=0.2,
        XiT=RandomWalkSpec(initial=0.5, scale=0.4),
        eta=4.0,
    )
    exact = dp_solve(tree, coeffs, DPMode.FINITE, 4.0)
    xs = np.linspace(-2.0, 3.0, 201)
    us = np.linspace(-12.0, 12.0, 961)
    result = dp_grid_search(tree, coeffs, xs, us, DPMode.FINITE, 4.0, exact=exact)
    assert result.max_deviation < 2e-2
    assert result.root_value == pytest.approx(exact.root_value(coeffs.x0), rel=1e-2)


def test_grid_search_limits():
    tree, coeffs = make_problem(5, eta=1.0)
    with pytest.raises(LatticeError):
        dp_grid_search(tree, coeffs, [0.0, 1.0, 2.0], [-1.0, 0.0, 1.0])
    tree, coeffs = make_problem(2, eta=1.0, branching=3)
    with pytest.raises(LatticeError):
        dp_grid_search(tree, coeffs, [0.0, 1.0, 2.0], [-1.0, 0.0, 1.0])
    tree, coeffs = make_problem(2, eta=1.0)
    with pytest.raises(ValueError):
        dp_grid_search(tree, coeffs, [0.0, 2.0, 1.0], [-1.0, 0.0, 1.0], n=1.0)


def test_grid_search_counts_unbracketed_controls():
    tree, coeffs = make_problem(2, eta=1.0, x0=1.0)
    result = dp_grid_search(tree, coeffs, np.linspace(-1, 3, 21), np.linspace(-0.1, 0.1, 5), n=math.inf)
    assert result.unbracketed > 0

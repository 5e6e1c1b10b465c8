import math
from typing import Any, Optional

import pytest

from src.lqtrack.coefficients import (
    BranchSignSpec,
    ConstantSpec,
    GeometricSpec,
    NodeTableSpec,
    RandomUniformSpec,
    RandomWalkSpec,
    Slot,
    build_coefficients,
)
from src.lqtrack.controller import simulate_feedback
from src.lqtrack.lattice import TimeGrid, build_binary_tree, build_recombining_walk
from src.lqtrack.riccati import compute_L, solve_discrete_bsrde, solve_minimal_limit
from src.lqtrack.signal import compute_signal

COTH_1 = 1.0 / math.tanh(1.0)


def _spec(value: Any):
    if isinstance(value, (int, float)):
        return ConstantSpec(value=float(value))
    return value


def make_problem(
    steps: int,
    nu: Any = 1.0,
    kappa: Any = 1.0,
    xi: Any = 0.0,
    XiT: Any = 0.0,
    eta: Any = math.inf,
    x0: float = 1.0,
    T: float = 1.0,
    recombining: bool = False,
    branching: int = 2,
):
    grid = TimeGrid(T, steps)
    if recombining:
        tree = build_recombining_walk(grid)
    else:
        tree = build_binary_tree(grid, branching=branching)
    specs = {
        Slot.NU: _spec(nu),
        Slot.KAPPA: _spec(kappa),
        Slot.XI: _spec(xi),
        Slot.XI_T: _spec(XiT),
        Slot.ETA: _spec(eta),
    }
    return tree, build_coefficients(tree, specs, x0)


def mixed_eta_table(steps: int = 4):
    """eta = 1 above the last level; the last level alternates inf with finite values."""
    levels = [[1.0] * 2 ** k for k in range(steps - 1)]
    last = [math.inf if i % 3 != 1 else 0.5 + i for i in range(2 ** (steps - 1))]
    return NodeTableSpec(values=levels + [last])


def solved(tree, coeffs, n: Optional[float] = None):
    """Riccati solution (limit when n is None), L, signal and feedback trajectory."""
    sol = solve_minimal_limit(tree, coeffs) if n is None else solve_discrete_bsrde(tree, coeffs, n)
    l = compute_L(sol, coeffs, tree)
    signal = compute_signal(tree, coeffs, sol, l)
    feedback = simulate_feedback(tree, coeffs, sol, signal)
    return sol, l, signal, feedback


@pytest.fixture
def liquidation():
    """Constant coefficients, hard constraint, zero targets on a 6-step tree."""
    return make_problem(6, x0=2.0)


@pytest.fixture
def finite_penalty():
    return make_problem(6, xi=0.5, XiT=1.0, eta=5.0, x0=0.0)


@pytest.fixture
def random_kappa():
    return make_problem(7, kappa=GeometricSpec(initial=1.0, up=1.1, down=0.9), x0=1.5)


@pytest.fixture
def mixed():
    """Random nu and targets with finite and infinite eta on different paths."""
    return make_problem(
        4,
        nu=RandomUniformSpec(low=0.5, high=1.5, seed=17),
        kappa=0.5,
        xi=RandomWalkSpec(initial=0.0, scale=0.3),
        XiT=RandomWalkSpec(initial=1.0, scale=0.5),
        eta=mixed_eta_table(4),
        x0=0.5,
    )


@pytest.fixture
def early_target():
    return make_problem(6, XiT=BranchSignSpec(level=1, scale=1.0, offset=0.5), x0=0.0)


SCENARIO_YAML = """\
name: {name}
description: test scenario
grid:
  T: 1.0
  steps: {steps}
coefficients:
  nu: {{kind: constant, value: 1.0}}
  kappa: {{kind: constant, value: {kappa}}}
  xi: {{kind: constant, value: 0.25}}
  XiT: {{kind: constant, value: 1.0}}
  eta: {{kind: constant, value: {eta}}}
x0: 0.0
truncation_levels: [1, 10, 100]
studies:
  perturbation_count: 5
"""


@pytest.fixture
def scenario_file(tmp_path):
    def write(name: str = "tiny", steps: int = 4, kappa: float = 1.0, eta: str = "inf"):
        path = tmp_path / f"{name}.yaml"
        path.write_text(SCENARIO_YAML.format(name=name, steps=steps, kappa=kappa, eta=eta), encoding="utf-8")
        return path

    return write

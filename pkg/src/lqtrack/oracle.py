"""Backward dynamic programming with quadratic value functions.

Every node carries V(x) = alpha x^2 - 2 beta x + gamma, the optimal cost-to-go
from state x before the node's control is chosen. Nothing here is shared with
the Riccati module: the two recursions are meant to be compared.

On a constrained terminal-adjacent node (eta = inf) in ``constrained`` mode
the last control is forced to (XiT - x) / dt.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
import math
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from src.lqtrack.coefficients import CoefficientSet
from src.lqtrack.controller import POLICY_ORACLE, TrajectoryBundle, evaluate_J_eta, simulate_policy
from src.lqtrack.errors import ConsistencyError, LatticeError, ValidationFailure
from src.lqtrack.lattice import ScenarioTree
from src.lqtrack.logger import get_logger

_logger = get_logger("oracle")

GRID_SEARCH_MAX_STEPS = 4


class DPMode(str, Enum):
    FINITE = "finite"
    CONSTRAINED = "constrained"


@dataclass(eq=False)
class QuadraticValue:
    tree: ScenarioTree
    mode: DPMode
    truncation: float
    alpha: List[np.ndarray]
    beta: List[np.ndarray]
    gamma: List[np.ndarray]
    u_intercept: List[np.ndarray]
    u_slope: List[np.ndarray]
    forced: np.ndarray

    def value(self, k: int, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.alpha[k] * x ** 2 - 2.0 * self.beta[k] * x + self.gamma[k]

    def root_value(self, x0: float) -> float:
        return float(self.value(0, np.full(1, float(x0)))[0])

    def control(self, k: int, x: np.ndarray) -> np.ndarray:
        return self.u_intercept[k] + self.u_slope[k] * x

    def signal(self, k: int) -> np.ndarray:
        """beta / alpha (the state the node's value function is centred on)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.alpha[k] > 0, self.beta[k] / self.alpha[k], 0.0)

    def nonnegativity_violation(self) -> float:
        """Largest relative shortfall of alpha gamma - beta^2 (and of alpha) below zero."""
        worst = 0.0
        for a, b, g in zip(self.alpha, self.beta, self.gamma):
            scale = np.maximum(np.abs(a * g) + b ** 2, 1e-300)
            worst = max(worst, float(np.max((b ** 2 - a * g) / scale)), float(np.max(-a)))
        return max(worst, 0.0)


def _terminal_weights(coeffs: CoefficientSet, mode: DPMode, n: float) -> np.ndarray:
    eta = np.asarray(coeffs.eta, dtype=float)
    if mode is DPMode.CONSTRAINED:
        return eta
    capped = np.minimum(eta, n)
    if np.any(np.isinf(capped)):
        raise ValidationFailure("finite-mode dynamic programming needs a finite truncation level", slot="eta")
    return capped


def dp_solve(
    tree: ScenarioTree, coeffs: CoefficientSet, mode: DPMode = DPMode.FINITE, n: float = math.inf
) -> QuadraticValue:
    """Exact backward induction, one quadratic minimization per node."""
    mode = DPMode(mode)
    dt = tree.dt
    last = tree.steps - 1
    weights = _terminal_weights(coeffs, mode, n)
    forced = np.isinf(weights)

    alpha: List[np.ndarray] = [np.empty(0)] * tree.steps
    beta: List[np.ndarray] = [np.empty(0)] * tree.steps
    gamma: List[np.ndarray] = [np.empty(0)] * tree.steps
    slope: List[np.ndarray] = [np.empty(0)] * tree.steps
    intercept: List[np.ndarray] = [np.empty(0)] * tree.steps

    for k in range(last, -1, -1):
        nu, kappa, xi = coeffs.nu.level(k), coeffs.kappa.level(k), coeffs.xi.level(k)
        if k == last:
            target = coeffs.xi_T
            safe = np.where(forced, 0.0, weights)
            next_a, next_b, next_g = safe, safe * target, safe * target ** 2
        else:
            next_a = tree.conditional_expectation(alpha[k + 1], k)
            next_b = tree.conditional_expectation(beta[k + 1], k)
            next_g = tree.conditional_expectation(gamma[k + 1], k)

        a = nu * dt + next_a
        p = nu * dt * xi + next_b
        r = nu * dt * xi ** 2 + next_g
        curvature = a + kappa / dt
        if np.any(curvature <= 0):
            i = int(np.argmax(curvature <= 0))
            raise ConsistencyError(f"Non-positive curvature at node {tree.node_id(k, i)}: {curvature[i]!r}")
        denom = kappa + a * dt
        alpha[k] = a * kappa / denom
        beta[k] = p * kappa / denom
        gamma[k] = r - p ** 2 * dt / denom
        intercept[k] = p / denom
        slope[k] = -a / denom

        if k == last and np.any(forced):
            target = coeffs.xi_T
            alpha[k] = np.where(forced, kappa / dt, alpha[k])
            beta[k] = np.where(forced, kappa * target / dt, beta[k])
            gamma[k] = np.where(forced, kappa * target ** 2 / dt + nu * dt * (target - xi) ** 2, gamma[k])
            intercept[k] = np.where(forced, target / dt, intercept[k])
            slope[k] = np.where(forced, -1.0 / dt, slope[k])

    qv = QuadraticValue(tree, mode, float(n), alpha, beta, gamma, intercept, slope, forced)
    _logger.debug("DP %s (n=%g): alpha_0=%.17g", mode.value, n, alpha[0][0])
    return qv


def simulate_oracle(tree: ScenarioTree, qv: QuadraticValue, x0: float) -> TrajectoryBundle:
    return simulate_policy(tree, x0, qv.control, POLICY_ORACLE)


# -- grid search ----------------------------------------------------------------------


@dataclass(eq=False)
class GridSearchResult:
    x_grid: np.ndarray
    u_grid: np.ndarray
    values: List[np.ndarray]
    unbracketed: int
    root_value: float
    max_deviation: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "root_value": self.root_value,
            "unbracketed": self.unbracketed,
            "max_deviation": self.max_deviation,
            "x_points": int(self.x_grid.size),
            "u_points": int(self.u_grid.size),
        }


def dp_grid_search(
    tree: ScenarioTree,
    coeffs: CoefficientSet,
    x_grid: Sequence[float],
    u_grid: Sequence[float],
    mode: DPMode = DPMode.FINITE,
    n: float = math.inf,
    exact: Optional[QuadraticValue] = None,
) -> GridSearchResult:
    """Tabulated backward induction on state and control grids.

    Continuation values are linearly interpolated in the state. A node's
    minimizer sitting on either end of `u_grid` counts as unbracketed.
    """
    if tree.steps > GRID_SEARCH_MAX_STEPS or tree.branching != 2:
        raise LatticeError(f"Grid search is limited to binary trees with at most {GRID_SEARCH_MAX_STEPS} steps")
    mode = DPMode(mode)
    xs = np.asarray(x_grid, dtype=float)
    us = np.asarray(u_grid, dtype=float)
    if np.any(np.diff(xs) <= 0) or np.any(np.diff(us) <= 0):
        raise ValueError("State and control grids must be strictly increasing")
    dt = tree.dt
    last = tree.steps - 1
    weights = _terminal_weights(coeffs, mode, n)
    tol = 1e-9 * max(1.0, float(np.max(np.abs(xs))))

    values: List[np.ndarray] = [np.empty(0)] * tree.steps
    unbracketed = 0
    y = xs[:, None] + us[None, :] * dt
    for k in range(last, -1, -1):
        size = tree.level_size(k)
        table = np.empty((size, xs.size))
        for i in range(size):
            nu = coeffs.nu.level(k)[i]
            kappa = coeffs.kappa.level(k)[i]
            xi = coeffs.xi.level(k)[i]
            stage = nu * dt * (y - xi) ** 2 + kappa * us[None, :] ** 2 * dt
            if k == last:
                target = coeffs.xi_T[i]
                if math.isinf(weights[i]):
                    ahead = np.where(np.abs(y - target) <= tol, 0.0, math.inf)
                else:
                    ahead = weights[i] * (y - target) ** 2
            else:
                ahead = np.zeros_like(y)
                children = tree.children(k)[i]
                probs = tree.transition_probabilities(k)[i]
                for child, prob in zip(children, probs):
                    ahead = ahead + prob * np.interp(y, xs, values[k + 1][child])
            total = stage + ahead
            best = np.argmin(total, axis=1)
            table[i] = total[np.arange(xs.size), best]
            finite = np.isfinite(table[i])
            unbracketed += int(np.sum(((best == 0) | (best == us.size - 1)) & finite))
            unbracketed += int(np.sum(~finite))
        values[k] = table

    root = float(np.interp(coeffs.x0, xs, values[0][0]))
    result = GridSearchResult(xs, us, values, unbracketed, root)
    if exact is not None:
        interior = slice(1, -1) if xs.size > 2 else slice(None)
        reference = exact.value(0, xs[interior])
        result.max_deviation = float(np.max(np.abs(values[0][0][interior] - reference)))
    if unbracketed:
        _logger.warning("Grid search: %d node/state pairs are not bracketed by the control grid", unbracketed)
    return result


# -- comparisons ------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyComparison:
    max_control_diff: float
    max_state_diff: float
    cost_gap: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "max_control_diff": self.max_control_diff,
            "max_state_diff": self.max_state_diff,
            "cost_gap": self.cost_gap,
        }


def compare_policies(
    a: TrajectoryBundle, b: TrajectoryBundle, coeffs: Optional[CoefficientSet] = None
) -> PolicyComparison:
    if a.tree is not b.tree:
        raise LatticeError(f"Cannot compare {a.policy} and {b.policy}: they live on different trees")
    tree = a.tree
    du = max(float(np.max(np.abs(a.u.level(k) - b.u.level(k)))) for k in range(tree.steps))
    dx = max(float(np.max(np.abs(a.X.level(k) - b.X.level(k)))) for k in range(tree.steps))
    dx = max(dx, float(np.max(np.abs(a.X_T - b.X_T))))
    gap = None
    if coeffs is not None:
        ja = evaluate_J_eta(a, coeffs, tree).value
        jb = evaluate_J_eta(b, coeffs, tree).value
        gap = ja - jb if math.isfinite(ja) or math.isfinite(jb) else 0.0
    return PolicyComparison(du, dx, gap)

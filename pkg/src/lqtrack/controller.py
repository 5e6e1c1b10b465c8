"""Policies on the tree and the cost functionals they are judged by.

Trajectories are enumerated by level-(N-1) nodes. The state after the last
control, X_N, is known at level N-1 and is stored there as ``X_T``.

Costs follow the post-step convention: step k is charged
nu_k (X_{k+1} - xi_k)^2 dt + kappa_k u_k^2 dt, on the nodes where X_{k+1}
lives. Weights that are infinite (eta = inf, or the limit Riccati solution on
constrained nodes) multiply a squared gap as inf * 0 = 0 when the gap is
within tolerance and +inf otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad

from src.lqtrack.coefficients import CoefficientSet
from src.lqtrack.config import CONSTRAINT_TOL, JC_WINDOW
from src.lqtrack.errors import LatticeError
from src.lqtrack.lattice import AdaptedProcess, ScenarioTree
from src.lqtrack.logger import get_logger
from src.lqtrack.riccati import LProcess, RiccatiSolution, closed_form_constant
from src.lqtrack.signal import SignalProcess

_logger = get_logger("controller")

ControlRule = Callable[[int, np.ndarray], np.ndarray]

POLICY_FEEDBACK = "feedback"
POLICY_ORACLE = "oracle"
POLICY_CUSTOM = "custom"


@dataclass(eq=False)
class TrajectoryBundle:
    tree: ScenarioTree
    X: AdaptedProcess
    X_T: np.ndarray
    u: AdaptedProcess
    policy: str
    x0: float

    def state_after(self, k: int) -> np.ndarray:
        """X_{k+1}, on level k+1 (or on level N-1 for the last step)."""
        return self.X_T if k == self.tree.steps - 1 else self.X.level(k + 1)

    def step_residual(self) -> float:
        """max |X_{k+1} - X_k - u_k dt| over all steps."""
        tree = self.tree
        worst = 0.0
        for k in range(tree.steps):
            before = _on_arrival(tree, self.X.level(k), k)
            control = _on_arrival(tree, self.u.level(k), k)
            worst = max(worst, float(np.max(np.abs(self.state_after(k) - before - control * tree.dt))))
        return worst

    def path_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(path node ids, X of shape (paths, N+1), u of shape (paths, N))."""
        tree = self.tree
        last = tree.steps - 1
        n_paths = tree.level_size(last)
        X = np.empty((n_paths, tree.steps + 1))
        u = np.empty((n_paths, tree.steps))
        for k in range(tree.steps):
            idx = tree.ancestor_index(last, k)
            X[:, k] = self.X.level(k)[idx]
            u[:, k] = self.u.level(k)[idx]
        X[:, -1] = self.X_T
        return np.asarray(tree.node_id(last, np.arange(n_paths))), X, u


def _on_arrival(tree: ScenarioTree, values: np.ndarray, k: int) -> np.ndarray:
    # level-k values seen from the nodes holding X_{k+1}
    return values if k == tree.steps - 1 else tree.carry_forward(values, k)


def _inf_weighted(weight: np.ndarray, gap: np.ndarray, tol: float) -> np.ndarray:
    weight = np.asarray(weight, dtype=float)
    gap = np.asarray(gap, dtype=float)
    infinite = np.isinf(weight)
    with np.errstate(invalid="ignore"):
        finite = np.where(infinite, 0.0, weight) * gap ** 2
    return np.where(infinite, np.where(np.abs(gap) <= tol, 0.0, math.inf), finite)


def simulate_policy(tree: ScenarioTree, x0: float, rule: ControlRule, policy: str = POLICY_CUSTOM) -> TrajectoryBundle:
    """Run u_k = rule(k, X_k) forward with X_{k+1} = X_k + u_k dt."""
    tree.require_paths("simulate_policy")
    dt = tree.dt
    last = tree.steps - 1
    X = [np.full(1, float(x0))]
    u: List[np.ndarray] = []
    X_T = np.empty(0)
    for k in range(tree.steps):
        uk = np.asarray(rule(k, X[k]), dtype=float)
        if uk.shape != X[k].shape:
            uk = np.broadcast_to(uk, X[k].shape).astype(float)
        u.append(uk)
        nxt = X[k] + uk * dt
        if k < last:
            X.append(tree.carry_forward(nxt, k))
        else:
            X_T = nxt
    return TrajectoryBundle(
        tree=tree,
        X=AdaptedProcess(tree, X, name="X"),
        X_T=X_T,
        u=AdaptedProcess(tree, u, name="u"),
        policy=policy,
        x0=float(x0),
    )


def feedback_rule(riccati: RiccatiSolution, signal: SignalProcess) -> ControlRule:
    def rule(k: int, X: np.ndarray) -> np.ndarray:
        return riccati.gain(k) * (signal.xi_hat.level(k) - X)

    return rule


def simulate_feedback(
    tree: ScenarioTree, coeffs: CoefficientSet, riccati: RiccatiSolution, signal: SignalProcess, x0: Optional[float] = None
) -> TrajectoryBundle:
    x0 = coeffs.x0 if x0 is None else float(x0)
    traj = simulate_policy(tree, x0, feedback_rule(riccati, signal), POLICY_FEEDBACK)
    _logger.debug("Feedback (truncation %s): E[X_N]=%.17g", riccati.truncation_level, tree.expectation(traj.X_T, tree.steps - 1))
    return traj


def table_policy(tree: ScenarioTree, x0: float, controls: Sequence[np.ndarray]) -> TrajectoryBundle:
    """Open-loop policy from a per-level table of node controls."""
    table = [np.asarray(c, dtype=float) for c in controls]
    return simulate_policy(tree, x0, lambda k, X: table[k], POLICY_CUSTOM)


def perturbed_policies(
    tree: ScenarioTree,
    coeffs: CoefficientSet,
    riccati: RiccatiSolution,
    signal: SignalProcess,
    count: int,
    seed: int = 0,
    scale: float = 0.5,
) -> List[TrajectoryBundle]:
    """Feedback plus node-local bumps.

    Each member bumps a random, non-empty set of nodes on one level. The last
    level is left alone (there is nothing to compare against on constrained
    nodes of the limit solution, where any bump makes the cost infinite).
    """
    rng = np.random.default_rng(seed)
    base = feedback_rule(riccati, signal)
    last = tree.steps - 1
    family = []
    for i in range(count):
        if last > 0:
            level = int(rng.integers(0, last))
            eligible = np.ones(tree.level_size(level), dtype=bool)
        else:
            level = 0
            eligible = ~coeffs.constrained if riccati.is_limit else np.ones(1, dtype=bool)
        size = tree.level_size(level)
        chosen = (rng.random(size) < 0.5) & eligible
        if not np.any(chosen) and np.any(eligible):
            chosen[int(rng.choice(np.flatnonzero(eligible)))] = True
        amount = rng.normal(0.0, scale, size)
        amount = np.where(np.abs(amount) < 1e-3 * scale, scale, amount)
        bump = np.where(chosen, amount, 0.0)

        def rule(k: int, X: np.ndarray, level=level, bump=bump) -> np.ndarray:
            u = base(k, X)
            return u + bump if k == level else u

        family.append(simulate_policy(tree, coeffs.x0, rule, f"perturbed-{i}"))
    return family


# -- costs ------------------------------------------------------------------------


def _cumulative_running(traj: TrajectoryBundle, coeffs: CoefficientSet) -> List[np.ndarray]:
    """Path sums of running costs; entry k lives on level k, entry N on level N-1."""
    tree = traj.tree
    dt = tree.dt
    last = tree.steps - 1
    cum = [np.zeros(1)]
    for k in range(tree.steps):
        nu = _on_arrival(tree, coeffs.nu.level(k), k)
        xi = _on_arrival(tree, coeffs.xi.level(k), k)
        kappa = _on_arrival(tree, coeffs.kappa.level(k), k)
        u = _on_arrival(tree, traj.u.level(k), k)
        step = (nu * (traj.state_after(k) - xi) ** 2 + kappa * u ** 2) * dt
        cum.append(_on_arrival(tree, cum[k], k) + step)
    return cum


def _level_of(tree: ScenarioTree, k: int) -> int:
    return min(k, tree.steps - 1)


@dataclass(frozen=True)
class ConstrainedCost:
    value: float
    running: float
    terminal: float
    max_violation: float
    witness: Optional[int] = None

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.value)


def evaluate_J_eta(
    traj: TrajectoryBundle, coeffs: CoefficientSet, tree: ScenarioTree, tol: float = CONSTRAINT_TOL
) -> ConstrainedCost:
    last = tree.steps - 1
    running = tree.expectation(_cumulative_running(traj, coeffs)[-1], last)
    gap = traj.X_T - coeffs.xi_T
    constrained = coeffs.constrained
    violation = np.where(constrained, np.abs(gap), 0.0)
    worst = float(np.max(violation)) if violation.size else 0.0
    terminal = tree.expectation(np.where(constrained, 0.0, coeffs.eta) * gap ** 2, last)
    if worst > tol:
        i = int(np.argmax(violation))
        witness = int(tree.node_id(last, i))
        _logger.debug("%s misses the terminal constraint by %.3e at node %d", traj.policy, worst, witness)
        return ConstrainedCost(math.inf, running, math.inf, worst, witness)
    return ConstrainedCost(running + terminal, running, terminal, worst)


def evaluate_J_n(traj: TrajectoryBundle, coeffs: CoefficientSet, n: float, tree: ScenarioTree) -> float:
    last = tree.steps - 1
    running = tree.expectation(_cumulative_running(traj, coeffs)[-1], last)
    penalty = coeffs.truncated_eta(n) * (traj.X_T - coeffs.xi_T) ** 2
    return running + tree.expectation(penalty, last)


@dataclass(frozen=True)
class TruncatedTimeCost:
    value: float
    argmax_level: int
    table: Tuple[Tuple[int, float, float], ...]

    def to_rows(self) -> List[Dict[str, float]]:
        return [{"level": k, "t": t, "value": v} for k, t, v in self.table]


def evaluate_J_c(
    traj: TrajectoryBundle,
    riccati: RiccatiSolution,
    signal: SignalProcess,
    tree: ScenarioTree,
    window: int = JC_WINDOW,
    tol: float = CONSTRAINT_TOL,
) -> TruncatedTimeCost:
    """Cost to date plus c (X - xihat)^2, on the last `window` grid times up to T.

    The grid time T itself uses the terminal weight c_T = eta ∧ n and the
    target XiT.
    """
    cum = _cumulative_running(traj, riccati.coeffs)
    steps = tree.steps
    times = tree.grid.times
    rows = []
    for kbar in range(max(0, steps - window + 1), steps + 1):
        if kbar < steps:
            penalty = riccati.c.level(kbar) * (traj.X.level(kbar) - signal.xi_hat.level(kbar)) ** 2
            total = cum[kbar] + penalty
        else:
            total = cum[steps] + _inf_weighted(riccati.terminal_values, traj.X_T - signal.xi_T, tol)
        rows.append((kbar, float(times[kbar]), tree.expectation(total, _level_of(tree, kbar))))
    best = max(range(len(rows)), key=lambda i: rows[i][2])
    return TruncatedTimeCost(rows[best][2], rows[best][0], tuple(rows))


@dataclass(frozen=True)
class ValueBreakdown:
    initial: float
    tracking: float
    signal_variation: float

    @property
    def total(self) -> float:
        return self.initial + self.tracking + self.signal_variation

    def to_dict(self) -> Dict[str, float]:
        return {
            "total": self.total,
            "initial": self.initial,
            "tracking": self.tracking,
            "signal_variation": self.signal_variation,
        }


def optimal_value_formula(
    riccati: RiccatiSolution, signal: SignalProcess, x0: float, tree: ScenarioTree, tol: float = CONSTRAINT_TOL
) -> ValueBreakdown:
    coeffs = riccati.coeffs
    dt = tree.dt
    last = tree.steps - 1
    xi_hat = signal.xi_hat
    initial = riccati.root_value * (float(x0) - xi_hat.level(0)[0]) ** 2
    tracking = 0.0
    variation = 0.0
    for k in range(tree.steps):
        gap = coeffs.xi.level(k) - xi_hat.level(k)
        tracking += tree.expectation(coeffs.nu.level(k) * dt * gap ** 2, k)
        if k < last:
            # E[c_{k+1} (xihat_{k+1} - xihat_k)^2 | node] over the children
            c_next = tree.child_values(riccati.c.level(k + 1), k)
            jump = tree.child_values(xi_hat.level(k + 1), k) - xi_hat.level(k)[:, None]
            per_node = np.sum(tree.transition_probabilities(k) * c_next * jump ** 2, axis=1)
        else:
            per_node = _inf_weighted(riccati.terminal_values, signal.xi_T - xi_hat.level(k), tol * np.maximum(1.0, np.abs(signal.xi_T)))
        variation += tree.expectation(per_node, k)
    return ValueBreakdown(float(initial), float(tracking), float(variation))


@dataclass(eq=False)
class CostReport:
    policy: str
    J_eta: ConstrainedCost
    J_c: TruncatedTimeCost
    J_n: Dict[float, float]
    initial: float
    tracking: float
    signal_variation: float
    mismatch: float
    C: List[np.ndarray]
    A: List[np.ndarray]
    M: List[np.ndarray]
    max_martingale_drift: float
    relative_martingale_drift: float
    a_monotonicity_violations: int
    decomposition_nonnegative: bool = field(default=True)

    @property
    def decomposed_total(self) -> float:
        return self.initial + self.tracking + self.signal_variation + self.mismatch

    def to_dict(self) -> Dict[str, Any]:
        return {
            "policy": self.policy,
            "J_eta": self.J_eta.value,
            "J_eta_violation": self.J_eta.max_violation,
            "J_eta_witness": self.J_eta.witness,
            "J_c": self.J_c.value,
            "J_c_level": self.J_c.argmax_level,
            "J_n": {repr(float(n)): v for n, v in self.J_n.items()},
            "initial": self.initial,
            "tracking": self.tracking,
            "signal_variation": self.signal_variation,
            "mismatch": self.mismatch,
            "max_martingale_drift": self.max_martingale_drift,
            "relative_martingale_drift": self.relative_martingale_drift,
            "a_monotonicity_violations": self.a_monotonicity_violations,
        }


def decompose_costs(
    traj: TrajectoryBundle,
    riccati: RiccatiSolution,
    signal: SignalProcess,
    coeffs: CoefficientSet,
    tree: ScenarioTree,
    truncation_levels: Sequence[float] = (),
    tol: float = CONSTRAINT_TOL,
    window: int = JC_WINDOW,
) -> CostReport:
    """C = C_0 + A + M along every path, with C_0 = c_0 (x0 - xihat_0)^2.

    Lists C, A and M hold levels 0..N-1 followed by the value at T (which
    lives on level N-1).
    """
    tree.require_paths("decompose_costs")
    dt = tree.dt
    last = tree.steps - 1
    xi_hat = signal.xi_hat
    cum = _cumulative_running(traj, coeffs)

    C = [cum[k] + riccati.c.level(k) * (traj.X.level(k) - xi_hat.level(k)) ** 2 for k in range(tree.steps)]
    C.append(cum[-1] + _inf_weighted(riccati.terminal_values, traj.X_T - signal.xi_T, tol))

    A = [np.zeros(1)]
    totals = {"tracking": 0.0, "signal_variation": 0.0, "mismatch": 0.0}
    for k in range(tree.steps):
        u_star = riccati.gain(k) * (xi_hat.level(k) - traj.X.level(k))
        weight = coeffs.kappa.level(k) + riccati.step_weight(k) * dt
        tracking = coeffs.nu.level(k) * dt * (coeffs.xi.level(k) - xi_hat.level(k)) ** 2
        mismatch = _inf_weighted(weight / dt, (traj.u.level(k) - u_star) * dt, tol)
        if k < last:
            variation = riccati.c.level(k + 1) * (xi_hat.level(k + 1) - tree.carry_forward(xi_hat.level(k), k)) ** 2
        else:
            variation = _inf_weighted(
                riccati.terminal_values, signal.xi_T - xi_hat.level(k), tol * np.maximum(1.0, np.abs(signal.xi_T))
            )
        on_arrival = _level_of(tree, k + 1)
        totals["tracking"] += tree.expectation(tracking, k)
        totals["mismatch"] += tree.expectation(mismatch, k)
        totals["signal_variation"] += tree.expectation(variation, on_arrival)
        A.append(_on_arrival(tree, A[k] + tracking + mismatch, k) + variation)

    C0 = float(C[0][0])
    M = [C[k] - C0 - A[k] for k in range(tree.steps + 1)]

    drift = 0.0
    violations = 0
    for k in range(tree.steps):
        if k < last:
            step = tree.conditional_expectation(M[k + 1], k) - M[k]
            a_prev = tree.carry_forward(A[k], k)
        else:
            step = M[k + 1] - M[k]
            a_prev = A[k]
        finite = np.isfinite(step)
        if np.any(finite):
            drift = max(drift, float(np.max(np.abs(step[finite]))))
        violations += int(np.sum(A[k + 1] < a_prev))
    scale = max(1.0, max(float(np.max(np.abs(c[np.isfinite(c)]), initial=0.0)) for c in C))

    terms = (C0, totals["tracking"], totals["signal_variation"], totals["mismatch"])
    report = CostReport(
        policy=traj.policy,
        J_eta=evaluate_J_eta(traj, coeffs, tree, tol),
        J_c=evaluate_J_c(traj, riccati, signal, tree, window, tol),
        J_n={float(n): evaluate_J_n(traj, coeffs, n, tree) for n in truncation_levels},
        initial=C0,
        tracking=totals["tracking"],
        signal_variation=totals["signal_variation"],
        mismatch=totals["mismatch"],
        C=C,
        A=A,
        M=M,
        max_martingale_drift=drift,
        relative_martingale_drift=drift / scale,
        a_monotonicity_violations=violations,
        decomposition_nonnegative=all(t >= 0 for t in terms),
    )
    if violations:
        _logger.warning("%s: A decreases on %d edges", traj.policy, violations)
    return report


# -- vanishing targets ----------------------------------------------------------------


def liquidation_residual(traj: TrajectoryBundle, riccati: RiccatiSolution, l: LProcess) -> Dict[str, float]:
    """With xi = XiT = 0: max |X_k c_k - x0 L_k| and max |u_k + x0 L_k / kappa_k|."""
    tree = traj.tree
    kappa = riccati.coeffs.kappa
    state, control = 0.0, 0.0
    for k in range(tree.steps):
        L = l.L.level(k)
        scale = np.maximum(np.abs(traj.x0 * L), 1e-300)
        state = max(state, float(np.max(np.abs(traj.X.level(k) * riccati.c.level(k) - traj.x0 * L) / scale)))
        target = -traj.x0 * L / kappa.level(k)
        control = max(
            control, float(np.max(np.abs(traj.u.level(k) - target) / np.maximum(np.abs(target), 1e-300)))
        )
    return {"state": state, "control": control}


def terminal_miss(traj: TrajectoryBundle, coeffs: CoefficientSet) -> float:
    """Largest |X_N - XiT| over constrained nodes (0 when nothing is constrained)."""
    mask = coeffs.constrained
    if not np.any(mask):
        return 0.0
    return float(np.max(np.abs(traj.X_T - coeffs.xi_T)[mask]))


def continuum_liquidation_path(
    nu: float, kappa: float, eta: float, x0: float, times: np.ndarray, T: float
) -> np.ndarray:
    """X_t = x0 exp(-int_0^t c/kappa ds) for constant coefficients and zero targets."""
    out = np.empty(len(times))
    for i, t in enumerate(times):
        if t >= T and math.isinf(eta):
            out[i] = 0.0
        else:
            out[i] = x0 * math.exp(-_rate_integral(nu, kappa, eta, min(t, T), T))
    return out


def _rate_integral(nu: float, kappa: float, eta: float, t: float, T: float) -> float:
    value, _ = quad(lambda s: closed_form_constant(nu, kappa, eta, s, T) / kappa, 0.0, t, limit=200)
    return value


# -- deterministic data -------------------------------------------------------------------


@dataclass(frozen=True)
class LevelPath:
    """Feedback run on one value per level; valid on any lattice when the data are deterministic."""

    X: np.ndarray
    u: np.ndarray
    J: float
    terminal_miss: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "X_T": float(self.X[-1]),
            "J_feedback": self.J,
            "terminal_miss": self.terminal_miss,
            "X": [float(x) for x in self.X],
        }


def deterministic_feedback_path(
    tree: ScenarioTree,
    coeffs: CoefficientSet,
    riccati: RiccatiSolution,
    signal_levels: Sequence[float],
    tol: float = CONSTRAINT_TOL,
) -> LevelPath:
    """Feedback u_k = c_k/kappa_k (xihat_k - X_k) on the level constants, with its J.

    With deterministic coefficients and targets every node of a level carries
    the same state, so one pass over the levels is the whole trajectory.
    """
    if not coeffs.is_deterministic():
        raise LatticeError("a level path needs deterministic coefficients and targets")
    table = coeffs.level_constants()
    dt = tree.dt
    steps = tree.steps
    X = np.empty(steps + 1)
    u = np.empty(steps)
    X[0] = coeffs.x0
    running = 0.0
    for k in range(steps):
        c = float(riccati.c.level(k)[0])
        kappa = float(table["kappa"][k])
        u[k] = c / kappa * (float(signal_levels[k]) - X[k])
        X[k + 1] = X[k] + u[k] * dt
        running += (float(table["nu"][k]) * (X[k + 1] - float(table["xi"][k])) ** 2 + kappa * u[k] ** 2) * dt
    target = float(coeffs.xi_T[0])
    gap = X[-1] - target
    terminal = float(_inf_weighted(riccati.terminal_values[:1], np.array([gap]), tol * max(1.0, abs(target)))[0])
    return LevelPath(X, u, running + terminal, abs(gap))

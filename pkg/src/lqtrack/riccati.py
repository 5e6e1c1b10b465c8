"""Backward Riccati equation for the penalty weight c.

Three regimes are covered:

* `closed_form_constant` for constant coefficients,
* `solve_ode_deterministic` for deterministic, time-varying coefficients
  (classical RK4 with step halving, plus an optional scipy cross-check),
* `solve_discrete_bsrde` / `solve_minimal_limit` for general node-valued
  coefficients on a scenario tree.

The tree recursion is the exact one-step coefficient of the quadratic value
function: with m_k = E[c_{k+1} | node] (m_{N-1} = eta ∧ n) and
m'_k = nu_k dt + m_k,

    c_k = m'_k kappa_k / (kappa_k + m'_k dt).

Running costs are charged on the state after the step, which is what makes
the feedback gain equal c_k / kappa_k. On constrained nodes (eta = inf) the
limit n -> inf of c_{N-1} is kappa_{N-1} / dt.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import math
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import solve_ivp

from src.lqtrack.coefficients import CoefficientSet
from src.lqtrack.config import (
    EXACT_TOL,
    MONOTONE_CONVERGED_TOL,
    ODE_MAX_HALVINGS,
    ODE_REL_TOL,
    SUPERMARTINGALE_TOL,
)
from src.lqtrack.errors import ConsistencyError, ConvergenceError, ValidationFailure
from src.lqtrack.lattice import AdaptedProcess, ScenarioTree, TimeGrid
from src.lqtrack.logger import get_logger

_logger = get_logger("riccati")

MINIMAL_LIMIT = "minimal-limit"
# n * dt and n * kappa must stay representable
MAX_TRUNCATION = sys.float_info.max ** 0.25


class Discounting(str, Enum):
    PRODUCT = "product"
    EXPONENTIAL = "exponential"


# -- closed form ---------------------------------------------------------------


def closed_form_constant(nu: float, kappa: float, eta: float, t: float, T: float) -> float:
    """Riccati solution at time t for constant nu, kappa and terminal weight eta."""
    if not t < T:
        raise ValueError(f"closed form needs t < T, got t={t}, T={T}")
    if nu < 0 or kappa <= 0 or eta < 0:
        raise ValueError("closed form needs nu >= 0, kappa > 0, eta >= 0")
    tau = T - t
    if nu == 0:
        if math.isinf(eta):
            return kappa / tau
        if eta == 0:
            return 0.0
        return 1.0 / (1.0 / eta + tau / kappa)
    root = math.sqrt(nu * kappa)
    th = math.tanh(math.sqrt(nu / kappa) * tau)
    if math.isinf(eta):
        return root / th
    return root * (root * th + eta) / (eta * th + root)


# -- deterministic ODE ----------------------------------------------------------


@dataclass
class OdeSolution:
    times: np.ndarray
    values: np.ndarray
    terminal: float
    halvings: int
    start_time: float
    scipy_max_rel_diff: Optional[float] = None


def _rk4_step(c: float, h: float, nu: float, kappa: float) -> float:
    # dc/dt = c^2/kappa - nu, integrated backwards (h < 0)
    def f(x: float) -> float:
        return x * x / kappa - nu

    k1 = f(c)
    k2 = f(c + 0.5 * h * k1)
    k3 = f(c + 0.5 * h * k2)
    k4 = f(c + h * k3)
    return c + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0


def _integrate(start: float, first_step: int, grid: TimeGrid, nu: np.ndarray, kappa: np.ndarray, sub: int) -> np.ndarray:
    out = np.empty(first_step + 1)
    out[first_step] = start
    h = -grid.dt / sub
    c = start
    for k in range(first_step - 1, -1, -1):
        for _ in range(sub):
            c = _rk4_step(c, h, float(nu[k]), float(kappa[k]))
            if not math.isfinite(c):
                raise ConvergenceError(f"ODE solution blew up on step {k}")
        out[k] = c
    return out


def solve_ode_deterministic(
    nu: Sequence[float],
    kappa: Sequence[float],
    eta: float,
    grid: TimeGrid,
    rel_tol: float = ODE_REL_TOL,
    max_halvings: int = ODE_MAX_HALVINGS,
    cross_check: bool = False,
) -> OdeSolution:
    """Backward RK4 for c' = c^2/kappa - nu with piecewise-constant tables.

    ``nu[k]``, ``kappa[k]`` apply on [t_k, t_{k+1}). For eta = inf the
    integration starts at T - dt from the constant-coefficient asymptote
    with the last step's coefficients. Substeps are halved until two
    successive refinements agree to `rel_tol` at every grid point.
    """
    nu = np.asarray(nu, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    if nu.shape != (grid.steps,) or kappa.shape != (grid.steps,):
        raise ValueError(f"coefficient tables need {grid.steps} entries")
    if math.isinf(eta):
        first = grid.steps - 1
        start_time = grid.times[first]
        start = closed_form_constant(float(nu[-1]), float(kappa[-1]), eta, start_time, grid.horizon)
    else:
        first = grid.steps
        start_time = grid.horizon
        start = float(eta)

    previous = _integrate(start, first, grid, nu, kappa, 1)
    for halving in range(1, max_halvings + 1):
        current = _integrate(start, first, grid, nu, kappa, 2 ** halving)
        scale = np.maximum(np.abs(current), 1e-300)
        diff = float(np.max(np.abs(current - previous) / scale))
        _logger.debug("ODE halving %s: max relative change %.3e", halving, diff)
        if diff < rel_tol:
            values = current[: grid.steps]
            solution = OdeSolution(grid.times[: grid.steps], values, float(eta), halving, start_time)
            if cross_check:
                reference = solve_ode_scipy(nu, kappa, start, start_time, grid)
                solution.scipy_max_rel_diff = float(
                    np.max(np.abs(values - reference) / np.maximum(np.abs(reference), 1e-300))
                )
            return solution
        previous = current
    raise ConvergenceError(f"RK4 step halving did not reach {rel_tol:g} after {max_halvings} halvings")


def coefficient_interval(t: float, grid: TimeGrid) -> int:
    """Index k of the interval [t_k, t_{k+1}) holding t; grid points map to their own interval."""
    k = int(np.floor(t / grid.dt + 1e-12))
    return min(max(k, 0), grid.steps - 1)


def solve_ode_scipy(nu: np.ndarray, kappa: np.ndarray, start: float, start_time: float, grid: TimeGrid) -> np.ndarray:
    """Reference solution with scipy's Radau integrator on the same grid points."""

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        k = coefficient_interval(t, grid)
        return np.array([y[0] * y[0] / kappa[k] - nu[k]])

    points = grid.times[: grid.steps]
    t_eval = points[::-1]
    t_eval = t_eval[t_eval <= start_time]
    sol = solve_ivp(rhs, (start_time, 0.0), [start], method="Radau", t_eval=t_eval, rtol=1e-11, atol=1e-13)
    if not sol.success:
        raise ConvergenceError(f"scipy reference integration failed: {sol.message}")
    return sol.y[0][::-1]


# -- tree recursion --------------------------------------------------------------


@dataclass(eq=False)
class RiccatiSolution:
    """Tree solution c on levels 0..N-1 with its martingale part.

    ``conditional_means[k]`` is m_k (``m_{N-1}`` is the terminal value) and
    ``martingale_increments[k]`` holds c_{k+1} - m_k per edge of level k.
    """

    tree: ScenarioTree
    coeffs: CoefficientSet
    c: AdaptedProcess
    conditional_means: Tuple[np.ndarray, ...]
    martingale_increments: Tuple[np.ndarray, ...]
    truncation_level: Union[float, str]
    terminal_values: np.ndarray

    @property
    def is_limit(self) -> bool:
        return self.truncation_level == MINIMAL_LIMIT

    @property
    def root_value(self) -> float:
        return float(self.c.level(0)[0])

    def step_weight(self, k: int) -> np.ndarray:
        """m'_k = nu_k dt + m_k (inf on constrained nodes of the limit object)."""
        return self.coeffs.nu.level(k) * self.tree.dt + self.conditional_means[k]

    def gain(self, k: int) -> np.ndarray:
        """Feedback gain c_k / kappa_k."""
        return self.c.level(k) / self.coeffs.kappa.level(k)

    def recursion_residual(self) -> float:
        """Largest relative mismatch when the one-step recursion is re-evaluated."""
        tree, dt = self.tree, self.tree.dt
        worst = 0.0
        last = tree.steps - 1
        for k in range(last, -1, -1):
            m = self.terminal_values if k == last else tree.conditional_expectation(self.c.level(k + 1), k)
            again = _step(self.coeffs.nu.level(k) * dt + m, self.coeffs.kappa.level(k), dt)
            c = self.c.level(k)
            worst = max(worst, float(np.max(np.abs(again - c) / np.maximum(np.abs(c), 1e-300))))
        return worst

    def martingale_mean_residual(self) -> float:
        worst = 0.0
        for k, inc in enumerate(self.martingale_increments):
            mean = np.sum(self.tree.transition_probabilities(k) * inc, axis=1)
            worst = max(worst, float(np.max(np.abs(mean))))
        return worst


def _step(m_prime: np.ndarray, kappa: np.ndarray, dt: float) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        c = m_prime * kappa / (kappa + m_prime * dt)
    return np.where(np.isinf(m_prime), kappa / dt, c)


def _backward(tree: ScenarioTree, coeffs: CoefficientSet, terminal: np.ndarray, label: Union[float, str]) -> RiccatiSolution:
    dt = tree.dt
    last = tree.steps - 1
    levels: List[np.ndarray] = [np.empty(0)] * tree.steps
    means: List[np.ndarray] = [np.empty(0)] * tree.steps
    m = terminal
    for k in range(last, -1, -1):
        means[k] = m
        levels[k] = _step(coeffs.nu.level(k) * dt + m, coeffs.kappa.level(k), dt)
        if k > 0:
            m = tree.conditional_expectation(levels[k], k - 1)
    increments = tuple(tree.child_values(levels[k + 1], k) - means[k][:, None] for k in range(last))
    c = AdaptedProcess(tree, levels, name="c")
    if not np.all(np.isfinite(levels[0])):
        raise ConsistencyError("Riccati recursion produced a non-finite root value")
    return RiccatiSolution(tree, coeffs, c, tuple(means), increments, label, terminal)


def solve_discrete_bsrde(tree: ScenarioTree, coeffs: CoefficientSet, n: float) -> RiccatiSolution:
    """Exact tree recursion with terminal value eta ∧ n."""
    n = float(n)
    if not (0 <= n <= MAX_TRUNCATION):
        raise ValidationFailure(f"Truncation level {n!r} is outside [0, {MAX_TRUNCATION:.3g}]", slot="truncation")
    sol = _backward(tree, coeffs, coeffs.truncated_eta(n), n)
    _logger.debug("Riccati n=%g: c_0=%.17g", n, sol.root_value)
    return sol


def solve_minimal_limit(tree: ScenarioTree, coeffs: CoefficientSet) -> RiccatiSolution:
    """The n -> inf limit: terminal value eta itself, inf on constrained nodes."""
    sol = _backward(tree, coeffs, np.array(coeffs.eta, dtype=float), MINIMAL_LIMIT)
    _logger.debug("Riccati minimal limit: c_0=%.17g", sol.root_value)
    return sol


@dataclass(eq=False)
class MonotoneSequence:
    levels: List[float]
    solutions: List[RiccatiSolution]
    limit: RiccatiSolution
    root_values: List[float]
    root_increments: List[float]
    converged: bool
    limit_gap: float

    @property
    def solution(self) -> RiccatiSolution:
        return self.solutions[-1]

    def table(self) -> List[Dict[str, Any]]:
        rows = []
        for i, (n, c0) in enumerate(zip(self.levels, self.root_values)):
            rows.append(
                {
                    "n": n,
                    "c0": c0,
                    "increment": self.root_increments[i - 1] if i else None,
                    "gap_to_limit": self.limit.root_value - c0,
                }
            )
        return rows


def minimal_supersolution(
    tree: ScenarioTree, coeffs: CoefficientSet, n_sequence: Sequence[float], rel_tol: float = EXACT_TOL
) -> MonotoneSequence:
    """Solve for every truncation level and certify node-wise monotonicity."""
    levels = [float(n) for n in n_sequence]
    if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"Truncation levels must be strictly increasing, got {levels}")
    solutions = [solve_discrete_bsrde(tree, coeffs, n) for n in levels]
    limit = solve_minimal_limit(tree, coeffs)
    chain = solutions + [limit]
    for lower, upper in zip(chain, chain[1:]):
        for k in range(tree.steps):
            lo, hi = lower.c.level(k), upper.c.level(k)
            bad = lo - hi > rel_tol * np.abs(hi)
            if np.any(bad):
                i = int(np.argmax(bad))
                raise ConsistencyError(
                    f"Truncation sequence not monotone at node {tree.node_id(k, i)}: "
                    f"c(n={lower.truncation_level})={lo[i]!r} > c(n={upper.truncation_level})={hi[i]!r}"
                )
    roots = [s.root_value for s in solutions]
    increments = [b - a for a, b in zip(roots, roots[1:])]
    converged = len(roots) > 1 and abs(increments[-1]) <= MONOTONE_CONVERGED_TOL * abs(roots[-1])
    gap = limit.root_value - roots[-1]
    _logger.info("Truncation sweep %s: c_0 %s, gap to limit %.3e", levels, ["%.10g" % r for r in roots], gap)
    return MonotoneSequence(levels, solutions, limit, roots, increments, converged, gap)


# -- the discounted process L ------------------------------------------------------


@dataclass(eq=False)
class LProcess:
    """L_k = c_k D_k with D_k the product of one-step discount factors.

    ``running_weight`` is the discount applied to the running target charged
    over step k (D_{k+1} for product discounting, D_k for exponential).
    """

    L: AdaptedProcess
    L_T: np.ndarray
    discount: AdaptedProcess
    terminal_discount: np.ndarray
    running_weight: AdaptedProcess
    discount_integral: AdaptedProcess
    discounting: Discounting

    def supermartingale_violation(self, rel_tol: float = SUPERMARTINGALE_TOL) -> Tuple[float, Optional[int]]:
        """Largest relative excess of E[L_{k+1} | node] over L_k, with a witness node."""
        tree = self.L.tree
        worst, witness = 0.0, None
        last = tree.steps - 1
        for k in range(last + 1):
            ahead = self.L_T if k == last else tree.conditional_expectation(self.L.level(k + 1), k)
            here = self.L.level(k)
            excess = (ahead - here) / np.maximum(np.abs(here), 1e-300)
            i = int(np.argmax(excess))
            if excess[i] > worst:
                worst = float(excess[i])
                if worst > rel_tol:
                    witness = int(tree.node_id(k, i))
        return worst, witness

    def terminal_positive_where_penalized(self, eta: np.ndarray) -> bool:
        return bool(np.all(self.L_T[eta > 0] > 0))


def compute_L(
    riccati: RiccatiSolution,
    coeffs: CoefficientSet,
    tree: ScenarioTree,
    discounting: Discounting = Discounting.PRODUCT,
) -> LProcess:
    tree.require_paths("compute_L")
    discounting = Discounting(discounting)
    if discounting is Discounting.EXPONENTIAL and riccati.is_limit:
        raise ValidationFailure("exponential discounting needs a finite truncation level", slot="discounting")
    dt = tree.dt
    last = tree.steps - 1
    factors, rates = [], []
    for k in range(tree.steps):
        rate = riccati.c.level(k) * dt / coeffs.kappa.level(k)
        rates.append(rate)
        factors.append(1.0 - rate if discounting is Discounting.PRODUCT else np.exp(-rate))
    if riccati.is_limit:
        # c dt / kappa is exactly one on constrained nodes
        factors[last] = np.where(coeffs.constrained, 0.0, factors[last])

    D = [np.ones(1)]
    integral = [np.zeros(1)]
    for k in range(last):
        D.append(tree.carry_forward(D[k] * factors[k], k))
        integral.append(tree.carry_forward(integral[k] + rates[k], k))
    D_N = D[last] * factors[last]

    L_levels = [riccati.c.level(k) * D[k] for k in range(tree.steps)]
    if riccati.is_limit:
        constrained = coeffs.constrained
        finite_part = np.where(constrained, 0.0, coeffs.eta) * D_N
        limit_part = coeffs.kappa.level(last) / dt * D[last]
        L_T = np.where(constrained, limit_part, finite_part)
    else:
        L_T = riccati.terminal_values * D_N

    if discounting is Discounting.PRODUCT:
        running = [D[k] * factors[k] for k in range(tree.steps)]
    else:
        running = list(D)

    lp = LProcess(
        L=AdaptedProcess(tree, L_levels, name="L"),
        L_T=L_T,
        discount=AdaptedProcess(tree, D, name="D"),
        terminal_discount=D_N,
        running_weight=AdaptedProcess(tree, running, name="R"),
        discount_integral=AdaptedProcess(tree, integral, name="int_c_over_kappa"),
        discounting=discounting,
    )
    worst, witness = lp.supermartingale_violation()
    if witness is not None:
        _logger.warning("L fails the supermartingale inequality by %.3e at node %s", worst, witness)
    return lp


# -- bounds -------------------------------------------------------------------------


@dataclass(frozen=True)
class UpperBoundHypotheses:
    """Declared constants: kappa_min <= kappa <= kappa_max, nu condition <= nu_bound, eta >= eta_min."""

    kappa_min: float
    kappa_max: float
    nu_bound: float
    eta_min: float


@dataclass
class BoundReport:
    lower_ok: bool
    lower_min_margin: float
    lower_witness: Optional[int]
    lower_margin: AdaptedProcess
    constrained_lower_ok: Optional[bool] = None
    constrained_lower_min_margin: Optional[float] = None
    upper_ran: bool = False
    hypotheses: Dict[str, bool] = field(default_factory=dict)
    nu_condition_sup: Optional[float] = None
    upper_ok: Optional[bool] = None
    upper_min_margin: Optional[float] = None
    upper_witness: Optional[int] = None
    upper_margin: Optional[AdaptedProcess] = None

    @property
    def violations(self) -> int:
        bad = 0 if self.lower_ok else 1
        bad += 1 if self.upper_ok is False else 0
        bad += 1 if self.constrained_lower_ok is False else 0
        return bad

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lower_ok": self.lower_ok,
            "lower_min_margin": self.lower_min_margin,
            "lower_witness": self.lower_witness,
            "constrained_lower_ok": self.constrained_lower_ok,
            "constrained_lower_min_margin": self.constrained_lower_min_margin,
            "upper_ran": self.upper_ran,
            "hypotheses": dict(self.hypotheses),
            "nu_condition_sup": self.nu_condition_sup,
            "upper_ok": self.upper_ok,
            "upper_min_margin": self.upper_min_margin,
            "upper_witness": self.upper_witness,
        }


def _min_margin(tree: ScenarioTree, margins: List[np.ndarray], scale: List[np.ndarray], tol: float):
    worst, witness, ok = math.inf, None, True
    for k, (m, s) in enumerate(zip(margins, scale)):
        i = int(np.argmin(m))
        if m[i] < worst:
            worst = float(m[i])
        bad = m < -tol * np.maximum(np.abs(s), 1.0)
        if ok and np.any(bad):
            ok = False
            witness = int(tree.node_id(k, int(np.argmax(bad))))
    return ok, worst, witness


def lower_bound_values(riccati: RiccatiSolution, coeffs: CoefficientSet, tree: ScenarioTree) -> List[np.ndarray]:
    """E[1 / (sum_{j>=k} dt/kappa_j + 1/(eta ∧ n)) | node] for k = 0..N-1."""
    dt = tree.dt
    last = tree.steps - 1
    terminal = riccati.terminal_values
    with np.errstate(divide="ignore"):
        inv_terminal = np.where(np.isinf(terminal), 0.0, 1.0 / terminal)
    suffix = np.zeros(tree.level_size(last))
    out: List[np.ndarray] = [np.empty(0)] * tree.steps
    for k in range(last, -1, -1):
        inv_kappa = dt / coeffs.kappa.level(k)
        suffix = suffix + inv_kappa[tree.ancestor_index(last, k)]
        with np.errstate(divide="ignore"):
            h = np.where(np.isinf(inv_terminal), 0.0, 1.0 / (suffix + inv_terminal))
        out[k] = tree.condition_down(h, last, k)
    return out


def upper_bound_values(coeffs: CoefficientSet, tree: ScenarioTree) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Upper bound (T-t_k)^-2 E[sum_{j>=k} (kappa_j + (T-t_j)^2 nu_j) dt | node] and the nu-condition ratio."""
    dt = tree.dt
    togo = tree.grid.time_to_go
    last = tree.steps - 1
    bound: List[np.ndarray] = [np.empty(0)] * tree.steps
    ratio: List[np.ndarray] = [np.empty(0)] * tree.steps
    acc_total = np.zeros(tree.level_size(last))
    acc_nu = np.zeros(tree.level_size(last))
    for k in range(last, -1, -1):
        if k < last:
            acc_total = tree.conditional_expectation(acc_total, k)
            acc_nu = tree.conditional_expectation(acc_nu, k)
        weighted_nu = togo[k] ** 2 * coeffs.nu.level(k) * dt
        acc_total = acc_total + coeffs.kappa.level(k) * dt + weighted_nu
        acc_nu = acc_nu + weighted_nu
        bound[k] = acc_total / togo[k] ** 2
        ratio[k] = acc_nu / togo[k]
    return bound, ratio


def check_bounds(
    riccati: RiccatiSolution,
    coeffs: CoefficientSet,
    tree: ScenarioTree,
    hypotheses: Optional[UpperBoundHypotheses] = None,
    tol: float = EXACT_TOL,
) -> BoundReport:
    """Verify the lower bound everywhere and the upper bound under declared hypotheses."""
    c_levels = list(riccati.c.levels())
    lower = lower_bound_values(riccati, coeffs, tree)
    margins = [c - lb for c, lb in zip(c_levels, lower)]
    ok, worst, witness = _min_margin(tree, margins, c_levels, tol)
    report = BoundReport(ok, worst, witness, AdaptedProcess(tree, margins, name="lower_margin"))

    if riccati.is_limit and np.any(coeffs.constrained):
        k_min = min(float(np.min(v)) for v in coeffs.kappa.levels())
        togo = tree.grid.time_to_go
        p_constrained = coeffs.constrained.astype(float)
        secondary = []
        for k in range(tree.steps):
            prob = tree.condition_down(p_constrained, tree.steps - 1, k)
            secondary.append(c_levels[k] - k_min / togo[k] * prob)
        s_ok, s_worst, _ = _min_margin(tree, secondary, c_levels, tol)
        report.constrained_lower_ok = s_ok
        report.constrained_lower_min_margin = s_worst

    if hypotheses is not None:
        bound, ratio = upper_bound_values(coeffs, tree)
        kappa_all = np.concatenate([np.asarray(v) for v in coeffs.kappa.levels()])
        sup_ratio = max(float(np.max(r)) for r in ratio)
        report.nu_condition_sup = sup_ratio
        report.hypotheses = {
            "kappa_bounded": bool(
                np.all(kappa_all >= hypotheses.kappa_min) and np.all(kappa_all <= hypotheses.kappa_max)
            ),
            "nu_condition": sup_ratio <= hypotheses.nu_bound,
            "eta_bounded_below": bool(np.all(coeffs.eta >= hypotheses.eta_min)) and hypotheses.eta_min > 0,
        }
        if all(report.hypotheses.values()):
            up_margins = [b - c for c, b in zip(c_levels, bound)]
            u_ok, u_worst, u_witness = _min_margin(tree, up_margins, c_levels, tol)
            report.upper_ran = True
            report.upper_ok = u_ok
            report.upper_min_margin = u_worst
            report.upper_witness = u_witness
            report.upper_margin = AdaptedProcess(tree, up_margins, name="upper_margin")
        else:
            failed = [name for name, held in report.hypotheses.items() if not held]
            _logger.warning("Upper bound skipped: declared hypotheses do not hold (%s)", ", ".join(failed))

    if not report.lower_ok:
        _logger.warning("Lower bound violated at node %s (margin %.3e)", report.lower_witness, report.lower_min_margin)
    return report


# -- integrability of the martingale part ---------------------------------------------


@dataclass
class IntegrabilityReport:
    vacuous: bool
    path_values: np.ndarray
    max_value: float
    mean_value: float
    quantiles: Dict[str, float]
    weighted_qv: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "vacuous": self.vacuous,
            "paths": int(self.path_values.size),
            "max": self.max_value,
            "mean": self.mean_value,
            "quantiles": dict(self.quantiles),
            "weighted_qv": self.weighted_qv,
        }


def check_integrability_condition(riccati: RiccatiSolution, tree: ScenarioTree) -> IntegrabilityReport:
    """Per-path sums of (Δc)^2 / c_parent^2 on paths ending where eta = inf.

    Also reports E[sum sqrt(T - t_k) (Δc)^2 / c_k^{3/2}] over all paths.
    """
    tree.require_paths("check_integrability_condition")
    last = tree.steps - 1
    togo = tree.grid.time_to_go
    rel = np.zeros(1)
    weighted = np.zeros(1)
    for k in range(last):
        par = tree.parents(k + 1)
        parent_c = riccati.c.level(k)[par]
        delta = riccati.c.level(k + 1) - parent_c
        rel = rel[par] + (delta / parent_c) ** 2
        weighted = weighted[par] + math.sqrt(togo[k]) * delta ** 2 / parent_c ** 1.5
    weighted_qv = tree.expectation(weighted, last)

    mask = riccati.coeffs.constrained
    if not np.any(mask):
        return IntegrabilityReport(True, np.zeros(0), 0.0, 0.0, {}, weighted_qv)
    values = rel[mask]
    probs = tree.node_probabilities(last)[mask]
    mean = float(np.dot(probs, values) / np.sum(probs))
    quantiles = {f"q{int(q * 100)}": float(np.quantile(values, q)) for q in (0.5, 0.9, 0.99)}
    return IntegrabilityReport(False, values, float(np.max(values)), mean, quantiles, weighted_qv)

"""Run orchestration: one scenario through the whole pipeline, plus sweeps.

`run_pipeline` computes everything and touches no files; `Engine` resolves
scenarios, runs the studies (in parallel where rows are independent) and
writes the artifacts.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.lqtrack.coefficients import CoefficientSet, ConstantSpec, validate
from src.lqtrack.config import EngineConfig
from src.lqtrack.controller import (
    CostReport,
    LevelPath,
    TrajectoryBundle,
    continuum_liquidation_path,
    decompose_costs,
    deterministic_feedback_path,
    evaluate_J_eta,
    evaluate_J_n,
    liquidation_residual,
    optimal_value_formula,
    perturbed_policies,
    simulate_feedback,
    terminal_miss,
)
from src.lqtrack.data.loader import build_problem, load_scenario, resolve_scenario
from src.lqtrack.data.schema import ScenarioConfig
from src.lqtrack.errors import ValidationFailure
from src.lqtrack.lattice import ScenarioTree
from src.lqtrack.logger import configure_logging, get_logger
from src.lqtrack.oracle import (
    GRID_SEARCH_MAX_STEPS,
    DPMode,
    QuadraticValue,
    compare_policies,
    dp_grid_search,
    dp_solve,
    simulate_oracle,
)
from src.lqtrack.riccati import (
    Discounting,
    LProcess,
    MonotoneSequence,
    RiccatiSolution,
    check_bounds,
    check_integrability_condition,
    closed_form_constant,
    compute_L,
    minimal_supersolution,
    solve_discrete_bsrde,
    solve_ode_deterministic,
)
from src.lqtrack.signal import (
    SignalProcess,
    compute_b,
    compute_signal,
    compute_weight,
    predictability_functional,
    refinement_trend,
)
from src.lqtrack.systems.artifacts import ArtifactWriter, processes_frame, trajectories_frame
from src.lqtrack.systems.report import KIND_BOUND, KIND_EXACT, KIND_SOFT, Check, RunReport, within
from src.lqtrack.utils.timer import Stopwatch

_logger = get_logger("app")

SWEEP_AXES = ("n", "N", "perturbation")
# refinement grids used when a scenario declares none
DEFAULT_WALK_REFINEMENT = (16, 32, 64, 128)
DEFAULT_TREE_REFINEMENT = (4, 6, 8, 10, 12)
SWEEP_PERTURBATIONS = 50


def _max_rel(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def _levels_max_rel(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    return max(_max_rel(x, y) for x, y in zip(a, b))


def _levels_abs_max(levels: Sequence[np.ndarray]) -> float:
    return max(float(np.max(np.abs(v))) for v in levels)


def _constant(spec: Any) -> Optional[float]:
    return spec.value if isinstance(spec, ConstantSpec) else None


def _constant_rates(cfg: ScenarioConfig) -> Optional[Tuple[float, float]]:
    nu, kappa = _constant(cfg.coefficients.nu), _constant(cfg.coefficients.kappa)
    return None if nu is None or kappa is None else (nu, kappa)


def vanishing_targets(coeffs: CoefficientSet) -> bool:
    return bool(all(np.all(v == 0) for v in coeffs.xi.levels()) and np.all(coeffs.xi_T == 0))


@dataclass(eq=False)
class PipelineResult:
    cfg: ScenarioConfig
    tree: ScenarioTree
    coeffs: CoefficientSet
    report: RunReport
    sequence: MonotoneSequence
    solution: RiccatiSolution
    oracle: QuadraticValue
    l: Optional[LProcess] = None
    signal: Optional[SignalProcess] = None
    feedback: Optional[TrajectoryBundle] = None
    oracle_path: Optional[TrajectoryBundle] = None
    costs: Dict[str, CostReport] = field(default_factory=dict)
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)

    @property
    def path_dependent(self) -> bool:
        return self.signal is not None

    def processes(self) -> pd.DataFrame:
        columns = {"c": self.solution.c}
        if self.signal is not None:
            columns.update({"L": self.l.L, "xi_hat": self.signal.xi_hat, "w": self.signal.w, "b": self.signal.b})
        if self.feedback is not None:
            columns.update({"X_hat": self.feedback.X, "u_hat": self.feedback.u})
        return processes_frame(self.tree, columns)

    def trajectories(self) -> pd.DataFrame:
        return trajectories_frame([t for t in (self.feedback, self.oracle_path) if t is not None])


def main_solution(cfg: ScenarioConfig, seq: MonotoneSequence) -> RiccatiSolution:
    """The minimal limit under product discounting, else the largest truncation level."""
    if cfg.conventions.discounting is Discounting.PRODUCT:
        return seq.limit
    return seq.solutions[-1]


def oracle_for(tree: ScenarioTree, coeffs: CoefficientSet, sol: RiccatiSolution) -> QuadraticValue:
    if sol.is_limit:
        return dp_solve(tree, coeffs, DPMode.CONSTRAINED)
    return dp_solve(tree, coeffs, DPMode.FINITE, float(sol.truncation_level))


def require_valid(coeffs: CoefficientSet) -> Dict[str, Any]:
    validation = validate(coeffs)
    if not validation.passed:
        first = validation.failures()[0]
        raise ValidationFailure(f"Condition {first.name} fails: {first.detail}", node_id=first.witness)
    return validation.to_dict()


def _riccati_section(result: PipelineResult, settings: EngineConfig) -> None:
    tree, coeffs, seq, sol, report = result.tree, result.coeffs, result.sequence, result.solution, result.report
    scale = max(1.0, _levels_abs_max(sol.c.levels()))
    report.add(within("riccati_recursion", sol.recursion_residual(), settings.exact_tol))
    report.add(within("riccati_martingale_mean", sol.martingale_mean_residual() / scale, settings.exact_tol))

    twin = [_levels_max_rel(oracle_for(tree, coeffs, s).alpha, s.c.levels()) for s in seq.solutions + [seq.limit]]
    report.add(within("twin_recursion", max(twin), settings.exact_tol))

    report.sections["riccati"] = {
        "c0": sol.root_value,
        "truncation": sol.truncation_level,
        "truncation_table": seq.table(),
        "converged": seq.converged,
        "limit_c0": seq.limit.root_value,
        "limit_gap": seq.limit_gap,
        "twin_max_rel_diff": max(twin),
    }


def _ode_section(result: PipelineResult) -> None:
    cfg, tree, coeffs, sol, report = result.cfg, result.tree, result.coeffs, result.solution, result.report
    if not coeffs.is_deterministic():
        return
    table = coeffs.level_constants()
    eta = float(coeffs.eta[0])
    ode = solve_ode_deterministic(table["nu"], table["kappa"], eta, tree.grid, cross_check=True)
    tree_path = np.array([v[0] for v in sol.c.levels()])
    section: Dict[str, Any] = {
        "c0_tree": sol.root_value,
        "c0_ode": float(ode.values[0]),
        "halvings": ode.halvings,
        "scipy_max_rel_diff": ode.scipy_max_rel_diff,
        "tree_vs_ode_max_rel_diff": _max_rel(tree_path[: ode.values.size], ode.values),
    }
    report.add(within("ode_vs_scipy", ode.scipy_max_rel_diff or 0.0, 1e-6, KIND_SOFT))
    rates = _constant_rates(cfg)
    if rates is not None:
        exact = closed_form_constant(rates[0], rates[1], eta, 0.0, tree.grid.horizon)
        section["c0_closed_form"] = exact
        section["c0_error"] = abs(sol.root_value - exact)
        report.add(within("closed_form_c0", section["c0_error"], 3.0 / tree.steps * max(1.0, exact), KIND_SOFT))
    report.sections["ode"] = section


def _signal_section(result: PipelineResult, settings: EngineConfig) -> None:
    cfg, tree, coeffs, sol, report = result.cfg, result.tree, result.coeffs, result.solution, result.report
    exact_kind = KIND_EXACT if cfg.conventions.discounting is Discounting.PRODUCT else KIND_SOFT

    l = compute_L(sol, coeffs, tree, cfg.conventions.discounting)
    worst, witness = l.supermartingale_violation()
    report.add(within("L_supermartingale", worst, settings.exact_tol, KIND_BOUND, witness=witness))
    report.add(Check("L_T_positive_where_penalized", l.terminal_positive_where_penalized(coeffs.eta), KIND_SOFT))

    signal = compute_signal(tree, coeffs, sol, l)
    weights = compute_weight(signal, l, tree, coeffs)
    b_report = compute_b(signal, sol)
    m_scale = max(1.0, _levels_abs_max(signal.M_tilde.levels()))
    report.add(within("signal_identity", signal.identity_residual(l.L), settings.exact_tol))
    report.add(within("signal_martingale", signal.martingale_residual() / m_scale, settings.exact_tol))
    report.add(within("weight_two_ways", weights.alternative_max_diff, settings.exact_tol, exact_kind))
    report.add(Check("weight_in_range", weights.w_in_range, KIND_SOFT))
    report.add(within("kernel_residual", weights.max_kernel_residual, 5.0 * tree.dt, KIND_SOFT))
    if weights.representation_residual is not None:
        report.add(within("convex_representation", weights.representation_residual, settings.domination_tol, exact_kind))

    gap = max(_max_rel(result.oracle.signal(k), signal.xi_hat.level(k)) for k in range(tree.steps))
    report.add(within("oracle_signal", gap, settings.domination_tol, exact_kind))

    last = tree.steps - 1
    report.sections["signal"] = {
        "xi_hat_0": float(signal.xi_hat.level(0)[0]),
        "w_0": float(signal.w.level(0)[0]),
        "terminal_gap": signal.terminal_gap(),
        "qv_expectation": tree.expectation(signal.qv.level(last), last),
        "weight": weights.to_dict(),
        "b": b_report.to_dict(),
        "oracle_signal_max_rel_diff": gap,
    }
    result.l = l
    result.signal = signal


def domination_margin(cost: CostReport) -> float:
    """(J_c - J_eta) relative to max(1, |J_eta|); inf against inf is a tie."""
    j_c, j_eta = cost.J_c.value, cost.J_eta.value
    if math.isinf(j_eta):
        return 0.0 if math.isinf(j_c) else -math.inf
    return (j_c - j_eta) / max(1.0, abs(j_eta))


def _domination_check(name: str, margin: float, settings: EngineConfig) -> Check:
    return Check(f"domination[{name}]", margin >= -settings.domination_tol, KIND_EXACT, margin, settings.domination_tol)


def _controller_section(result: PipelineResult, settings: EngineConfig) -> None:
    cfg, tree, coeffs, sol, signal, report = (
        result.cfg,
        result.tree,
        result.coeffs,
        result.solution,
        result.signal,
        result.report,
    )
    conventions = cfg.conventions
    exact_kind = KIND_EXACT if conventions.discounting is Discounting.PRODUCT else KIND_SOFT
    levels = cfg.truncation_levels

    feedback = simulate_feedback(tree, coeffs, sol, signal)
    report.add(within("state_recursion", feedback.step_residual(), settings.exact_tol * max(1.0, abs(cfg.x0))))
    cost = decompose_costs(
        feedback, sol, signal, coeffs, tree, levels, tol=conventions.feedback_constraint_tol, window=conventions.jc_window
    )
    value = optimal_value_formula(sol, signal, cfg.x0, tree)
    report.add(within("feedback_mismatch_zero", cost.mismatch, settings.exact_tol))
    report.add(
        Check("A_monotone[feedback]", cost.a_monotonicity_violations == 0, KIND_EXACT, float(cost.a_monotonicity_violations))
    )
    report.add(within("martingale_drift[feedback]", cost.relative_martingale_drift, settings.domination_tol, exact_kind))
    value_gap = abs(cost.J_c.value - value.total) / max(1.0, abs(value.total))
    report.add(within("value_formula", value_gap, settings.domination_tol, exact_kind))
    report.add(_domination_check("feedback", domination_margin(cost), settings))

    oracle_path = simulate_oracle(tree, result.oracle, cfg.x0)
    oracle_cost = decompose_costs(
        oracle_path, sol, signal, coeffs, tree, levels, tol=conventions.oracle_constraint_tol, window=conventions.jc_window
    )
    comparison = compare_policies(feedback, oracle_path, coeffs)
    u_scale = max(1.0, _levels_abs_max(feedback.u.levels()))
    report.add(within("feedback_vs_oracle", comparison.max_control_diff / u_scale, settings.domination_tol, exact_kind))
    v0 = result.oracle.root_value(cfg.x0)
    report.add(within("oracle_value", abs(v0 - value.total) / max(1.0, abs(v0)), settings.domination_tol, exact_kind))
    attained = evaluate_J_eta(oracle_path, coeffs, tree, conventions.oracle_constraint_tol)
    report.add(
        Check(
            "oracle_terminal_attainment",
            attained.feasible or not sol.is_limit,
            KIND_EXACT,
            attained.max_violation,
            conventions.oracle_constraint_tol,
            attained.witness,
        )
    )
    report.add(_domination_check("oracle", domination_margin(oracle_cost), settings))

    section: Dict[str, Any] = {
        "feedback": cost.to_dict(),
        "oracle": oracle_cost.to_dict(),
        "value_formula": value.to_dict(),
        "oracle_V0": v0,
        "comparison": comparison.to_dict(),
        "feedback_terminal_miss": terminal_miss(feedback, coeffs),
        "J_c_table": cost.J_c.to_rows(),
    }
    if vanishing_targets(coeffs):
        residual = liquidation_residual(feedback, sol, result.l)
        report.add(within("liquidation_state", residual["state"], settings.exact_tol, exact_kind))
        report.add(within("liquidation_control", residual["control"], settings.exact_tol, exact_kind))
        expected = sol.root_value * cfg.x0 ** 2
        miss = abs(cost.J_c.value - expected) / max(1.0, expected)
        report.add(within("liquidation_value", miss, settings.exact_tol * 10, exact_kind))
        section["liquidation"] = residual
        rates = _constant_rates(cfg)
        eta = _constant(cfg.coefficients.eta)
        if rates is not None and eta is not None:
            continuum = continuum_liquidation_path(rates[0], rates[1], eta, cfg.x0, tree.grid.times, tree.grid.horizon)
            discrete = np.array([feedback.X.level(k)[0] for k in range(tree.steps)] + [feedback.X_T[0]])
            section["continuum_path_max_diff"] = float(np.max(np.abs(discrete - continuum)))
    report.sections["controller"] = section
    result.feedback = feedback
    result.oracle_path = oracle_path
    result.costs = {"feedback": cost, "oracle": oracle_cost}


def _level_path(
    cfg: ScenarioConfig, tree: ScenarioTree, coeffs: CoefficientSet, sol: RiccatiSolution, oracle: QuadraticValue
) -> LevelPath:
    # deterministic data: the oracle centre beta/alpha is the signal on every level
    signal_levels = [float(oracle.signal(k)[0]) for k in range(tree.steps)]
    return deterministic_feedback_path(tree, coeffs, sol, signal_levels, cfg.conventions.feedback_constraint_tol)


def _walk_section(result: PipelineResult, settings: EngineConfig) -> None:
    """Feedback cost on a recombining walk, run on the level constants of deterministic data."""
    cfg, tree, coeffs, sol, report = result.cfg, result.tree, result.coeffs, result.solution, result.report
    path = _level_path(cfg, tree, coeffs, sol, result.oracle)
    v0 = result.oracle.root_value(cfg.x0)
    report.add(within("walk_value_vs_oracle", abs(path.J - v0) / max(1.0, abs(v0)), settings.domination_tol))
    section: Dict[str, Any] = {**path.to_dict(), "oracle_V0": v0}
    if sol.is_limit:
        report.add(
            Check(
                "walk_terminal_attainment",
                path.terminal_miss <= cfg.conventions.feedback_constraint_tol,
                KIND_EXACT,
                path.terminal_miss,
                cfg.conventions.feedback_constraint_tol,
            )
        )
    if vanishing_targets(coeffs):
        expected = sol.root_value * cfg.x0 ** 2
        section["J_formula"] = expected
        report.add(within("walk_liquidation_value", abs(path.J - expected) / max(1.0, expected), settings.exact_tol * 10))
    report.sections["walk_controller"] = section


def perturbation_table(result: PipelineResult, settings: EngineConfig) -> pd.DataFrame:
    """J_c gap against node-local bumps of the feedback, next to the mismatch term."""
    cfg, tree, coeffs, sol, signal, report = (
        result.cfg,
        result.tree,
        result.coeffs,
        result.solution,
        result.signal,
        result.report,
    )
    studies = cfg.studies
    conventions = cfg.conventions
    base = result.costs["feedback"]
    family = perturbed_policies(
        tree, coeffs, sol, signal, studies.perturbation_count, studies.perturbation_seed, studies.perturbation_scale
    )
    rows = []
    for traj in family:
        cost = decompose_costs(
            traj, sol, signal, coeffs, tree, tol=conventions.feedback_constraint_tol, window=conventions.jc_window
        )
        gap = cost.J_c.value - base.J_c.value
        rows.append(
            {
                "policy": traj.policy,
                "J_c": cost.J_c.value,
                "J_eta": cost.J_eta.value,
                "J_c_gap": gap,
                "mismatch": cost.mismatch,
                "gap_error": abs(gap - cost.mismatch) / max(1.0, abs(cost.J_c.value)),
                "domination_margin": domination_margin(cost),
                "A_violations": cost.a_monotonicity_violations,
                "martingale_drift": cost.max_martingale_drift,
            }
        )
    frame = pd.DataFrame(rows)
    if frame.empty:
        return frame
    kind = KIND_EXACT if conventions.discounting is Discounting.PRODUCT else KIND_SOFT
    worst_error = float(frame["gap_error"].max())
    report.add(within("perturbation_gap_equals_mismatch", worst_error, settings.domination_tol, kind))
    report.add(_domination_check("perturbed", float(frame["domination_margin"].min()), settings))
    violations = int(frame["A_violations"].sum())
    report.add(Check("A_monotone[perturbed]", violations == 0, KIND_EXACT, float(violations)))
    report.add(Check("feedback_strictly_better", bool((frame["J_c_gap"] > 0).all()), KIND_SOFT))
    report.sections["perturbation"] = {
        "count": len(rows),
        "max_gap_error": worst_error,
        "min_domination_margin": float(frame["domination_margin"].min()),
        "max_martingale_drift": float(frame["martingale_drift"].max()),
    }
    return frame


def _bounds_section(result: PipelineResult) -> None:
    cfg, report = result.cfg, result.report
    hypotheses = cfg.upper_bound.hypotheses() if cfg.upper_bound else None
    bounds = check_bounds(result.solution, result.coeffs, result.tree, hypotheses)
    report.add(Check("lower_bound", bounds.lower_ok, KIND_BOUND, bounds.lower_min_margin, witness=bounds.lower_witness))
    if bounds.constrained_lower_ok is not None:
        report.add(
            Check("constrained_lower_bound", bounds.constrained_lower_ok, KIND_BOUND, bounds.constrained_lower_min_margin)
        )
    if bounds.upper_ran:
        report.add(Check("upper_bound", bool(bounds.upper_ok), KIND_BOUND, bounds.upper_min_margin, witness=bounds.upper_witness))
    elif hypotheses is not None:
        failed = ", ".join(name for name, held in bounds.hypotheses.items() if not held)
        report.add(Check("upper_bound_hypotheses", False, KIND_SOFT, detail=f"declared hypotheses do not hold: {failed}"))
    report.sections["bounds"] = bounds.to_dict()


def _integrability_section(result: PipelineResult) -> None:
    tree, coeffs = result.tree, result.coeffs
    section = check_integrability_condition(result.solution, tree).to_dict()
    value = optimal_value_formula(result.solution, result.signal, result.cfg.x0, tree)
    last = tree.steps - 1
    section.update(
        {
            "terminal_target_L": tree.expectation(np.abs(coeffs.xi_T * result.l.L_T), last),
            "tracking_sum": value.tracking,
            "signal_variation_sum": value.signal_variation,
        }
    )
    result.report.sections["integrability"] = section


def _grid_search_section(result: PipelineResult) -> None:
    grid = result.cfg.studies.grid_search
    tree, report = result.tree, result.report
    if tree.steps > GRID_SEARCH_MAX_STEPS or tree.branching != 2:
        _logger.warning("Grid search skipped: it needs a binary tree with at most %d steps", GRID_SEARCH_MAX_STEPS)
        return
    xs = np.linspace(grid.x_min, grid.x_max, grid.x_points)
    us = np.linspace(grid.u_min, grid.u_max, grid.u_points)
    oracle = result.oracle
    found = dp_grid_search(tree, result.coeffs, xs, us, oracle.mode, oracle.truncation, exact=oracle)
    report.add(Check("grid_search_bracketed", found.unbracketed == 0, KIND_SOFT, float(found.unbracketed)))
    report.sections["grid_search"] = found.to_dict()


def run_pipeline(
    cfg: ScenarioConfig,
    settings: Optional[EngineConfig] = None,
    steps: Optional[int] = None,
    stopwatch: Optional[Stopwatch] = None,
) -> PipelineResult:
    """Build, solve, simulate and check one scenario; no file output.

    Raises ValidationFailure before any numerics when the coefficients are
    not admissible. Failed identities never raise here: they become failed
    checks on the returned report.
    """
    settings = settings or EngineConfig()
    watch = stopwatch or Stopwatch()
    studies = cfg.studies

    with watch.lap("build"):
        tree, coeffs = build_problem(cfg, steps=steps, max_nodes=settings.max_tree_nodes)
    report = RunReport(
        scenario={
            "name": cfg.name,
            "description": cfg.description,
            "T": cfg.grid.T,
            "steps": tree.steps,
            "branching": tree.branching,
            "recombining": tree.recombining,
            "nodes": tree.num_nodes,
            "x0": cfg.x0,
            "discounting": cfg.conventions.discounting.value,
            "truncation_levels": list(cfg.truncation_levels),
            "constrained_nodes": int(np.sum(coeffs.constrained)),
        }
    )
    with watch.lap("validate"):
        report.sections["validation"] = require_valid(coeffs)

    with watch.lap("riccati"):
        seq = minimal_supersolution(tree, coeffs, cfg.truncation_levels, rel_tol=settings.exact_tol)
        sol = main_solution(cfg, seq)
        oracle = oracle_for(tree, coeffs, sol)
        result = PipelineResult(cfg, tree, coeffs, report, seq, sol, oracle)
        _riccati_section(result, settings)
    report.add(within("oracle_nonnegative", oracle.nonnegativity_violation(), settings.exact_tol))
    report.sections["oracle"] = {"mode": oracle.mode.value, "V0": oracle.root_value(cfg.x0)}
    with watch.lap("ode"):
        _ode_section(result)
    if studies.predictability:
        report.sections["predictability"] = {"functional": predictability_functional(coeffs.xi_T, tree)}

    if tree.recombining:
        _logger.warning("Recombining lattice: path-dependent stages are skipped")
        report.sections["skipped"] = ["signal", "controller", "perturbation", "bounds", "integrability"]
        if coeffs.is_deterministic():
            with watch.lap("walk_controller"):
                _walk_section(result, settings)
    else:
        with watch.lap("signal"):
            _signal_section(result, settings)
        with watch.lap("controller"):
            _controller_section(result, settings)
        if studies.perturbation_count:
            with watch.lap("perturbation"):
                result.tables["perturbation"] = perturbation_table(result, settings)
        if studies.bounds_check:
            with watch.lap("bounds"):
                _bounds_section(result)
        if studies.integrability_check:
            with watch.lap("integrability"):
                _integrability_section(result)
    if studies.grid_search is not None:
        with watch.lap("grid_search"):
            _grid_search_section(result)

    for stage, seconds in watch.laps.items():
        _logger.debug("Stage %s: %.3fs", stage, seconds)
    return result


# -- studies ------------------------------------------------------------------------------


def _truncation_row(cfg: ScenarioConfig, tree: ScenarioTree, coeffs: CoefficientSet, sol: RiccatiSolution) -> Dict[str, Any]:
    oracle = oracle_for(tree, coeffs, sol)
    row: Dict[str, Any] = {
        "n": "limit" if sol.is_limit else float(sol.truncation_level),
        "c0": sol.root_value,
        "twin_max_rel_diff": _levels_max_rel(oracle.alpha, sol.c.levels()),
        "oracle_V0": oracle.root_value(cfg.x0),
    }
    if tree.recombining:
        return row
    discounting = Discounting.PRODUCT if sol.is_limit else cfg.conventions.discounting
    l = compute_L(sol, coeffs, tree, discounting)
    signal = compute_signal(tree, coeffs, sol, l)
    feedback = simulate_feedback(tree, coeffs, sol, signal)
    row["value_formula"] = optimal_value_formula(sol, signal, cfg.x0, tree).total
    if not sol.is_limit:
        row["J_n_feedback"] = evaluate_J_n(feedback, coeffs, float(sol.truncation_level), tree)
    row["J_eta_feedback"] = evaluate_J_eta(feedback, coeffs, tree, cfg.conventions.feedback_constraint_tol).value
    row["terminal_miss"] = terminal_miss(feedback, coeffs)
    return row


def truncation_table(result: PipelineResult, threads: int = 1) -> pd.DataFrame:
    """One row per truncation level plus the limit; c0 must be nondecreasing."""
    chain = list(result.sequence.solutions) + [result.sequence.limit]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows = list(pool.map(lambda s: _truncation_row(result.cfg, result.tree, result.coeffs, s), chain))
    limit_c0 = result.sequence.limit.root_value
    previous = None
    for row in rows:
        row["increment"] = math.nan if previous is None else row["c0"] - previous
        row["monotone"] = previous is None or row["c0"] >= previous
        row["gap_to_limit"] = limit_c0 - row["c0"]
        previous = row["c0"]
    return pd.DataFrame(rows)


def _refinement_row(cfg: ScenarioConfig, steps: int, settings: EngineConfig) -> Dict[str, Any]:
    tree, coeffs = build_problem(cfg, steps=steps, max_nodes=settings.max_tree_nodes)
    require_valid(coeffs)
    seq = minimal_supersolution(tree, coeffs, cfg.truncation_levels, rel_tol=settings.exact_tol)
    sol = main_solution(cfg, seq)
    row: Dict[str, Any] = {"N": steps, "dt": tree.dt, "c0": sol.root_value}
    rates = _constant_rates(cfg)
    if rates is not None and coeffs.is_deterministic():
        exact = closed_form_constant(rates[0], rates[1], float(coeffs.eta[0]), 0.0, tree.grid.horizon)
        row["c0_closed_form"] = exact
        row["c0_error"] = abs(sol.root_value - exact)
        row["c0_error_times_N"] = row["c0_error"] * steps
    row["predictability"] = predictability_functional(coeffs.xi_T, tree)
    # truncation tied to the grid: n = N
    tied = solve_discrete_bsrde(tree, coeffs, float(steps))
    if tree.recombining:
        if coeffs.is_deterministic():
            path = _level_path(cfg, tree, coeffs, sol, oracle_for(tree, coeffs, sol))
            row["J_feedback"] = path.J
            if sol.is_limit:
                row["terminal_miss_limit"] = path.terminal_miss
            row["terminal_miss"] = _level_path(cfg, tree, coeffs, tied, oracle_for(tree, coeffs, tied)).terminal_miss
            row["terminal_miss_times_N"] = row["terminal_miss"] * steps
        return row

    l = compute_L(sol, coeffs, tree, cfg.conventions.discounting)
    signal = compute_signal(tree, coeffs, sol, l)
    weights = compute_weight(signal, l, tree, coeffs)
    row["kernel_residual"] = weights.max_kernel_residual
    row["b_residual_over_dt2"] = compute_b(signal, sol).max_residual_over_dt2
    row["xi_hat_terminal_gap"] = signal.terminal_gap()
    row["w_terminal_gap"] = weights.terminal_weight_gap

    signal_n = compute_signal(tree, coeffs, tied, compute_L(tied, coeffs, tree, cfg.conventions.discounting))
    row["terminal_miss"] = terminal_miss(simulate_feedback(tree, coeffs, tied, signal_n), coeffs)
    row["terminal_miss_times_N"] = row["terminal_miss"] * steps
    if sol.is_limit:
        row["terminal_miss_limit"] = terminal_miss(simulate_feedback(tree, coeffs, sol, signal), coeffs)

    bumped = perturbed_policies(tree, coeffs, sol, signal, 1, cfg.studies.perturbation_seed, cfg.studies.perturbation_scale)
    cost = decompose_costs(bumped[0], sol, signal, coeffs, tree, tol=cfg.conventions.feedback_constraint_tol)
    row["martingale_drift"] = cost.max_martingale_drift
    return row


def refinement_table(cfg: ScenarioConfig, settings: EngineConfig, steps: Sequence[int] = ()) -> pd.DataFrame:
    """Re-run the scenario on finer grids; rows come back ordered by N."""
    default = DEFAULT_WALK_REFINEMENT if cfg.tree.recombining else DEFAULT_TREE_REFINEMENT
    grid = sorted(set(steps or cfg.studies.refinement or default))
    with ThreadPoolExecutor(max_workers=max(1, settings.threads)) as pool:
        rows = list(pool.map(lambda n: _refinement_row(cfg, n, settings), grid))
    frame = pd.DataFrame(rows).sort_values("N", ignore_index=True)
    _logger.info("Refinement N=%s: c0=%s", grid, ["%.10g" % v for v in frame["c0"]])
    return frame


def _non_increasing(values: Sequence[float]) -> bool:
    return all(b <= a for a, b in zip(values, values[1:]))


def refinement_summary(frame: pd.DataFrame) -> Dict[str, Any]:
    summary: Dict[str, Any] = {"N": [int(n) for n in frame["N"]]}
    if "predictability" in frame:
        summary["predictability_trend"] = refinement_trend(list(frame["predictability"]))
    if "c0_error" in frame:
        summary["c0_error_constant"] = float(frame["c0_error_times_N"].max())
    if "terminal_miss_times_N" in frame:
        summary["terminal_miss_C"] = float(frame["terminal_miss_times_N"].max())
    if "terminal_miss_limit" in frame:
        summary["terminal_miss_limit"] = float(frame["terminal_miss_limit"].max())
    return summary


def refinement_checks(frame: pd.DataFrame, attainment_tol: float) -> List[Check]:
    """Named convergence checks over a refinement table."""
    checks: List[Check] = []
    if "c0_error" in frame:
        scale = 3.0 * max(1.0, float(frame["c0_closed_form"].abs().max()))
        worst = float(frame["c0_error_times_N"].max())
        checks.append(
            Check("refinement_c0_error_rate", worst <= scale, KIND_BOUND, worst, scale, detail="max |c0 - closed form| * N")
        )
        checks.append(Check("refinement_c0_error_decreasing", _non_increasing(list(frame["c0_error"])), KIND_SOFT))
    if "kernel_residual" in frame:
        residuals = list(frame["kernel_residual"])
        checks.append(Check("refinement_kernel_residual_decreasing", _non_increasing(residuals), KIND_SOFT, max(residuals)))
    if "terminal_miss_times_N" in frame:
        misses = frame["terminal_miss_times_N"]
        # miss <= C/N with n = N: C stays finite
        bounded = bool(np.isfinite(misses).all())
        checks.append(
            Check("refinement_terminal_miss_rate", bounded, KIND_SOFT, float(misses.max()), detail="max terminal miss * N at n = N")
        )
    if "terminal_miss_limit" in frame:
        worst = float(frame["terminal_miss_limit"].max())
        checks.append(Check("refinement_limit_attainment", worst <= attainment_tol, KIND_EXACT, worst, attainment_tol))
    return checks


# -- engine ------------------------------------------------------------------------------


class Engine:
    def __init__(self, settings: Optional[EngineConfig] = None, debug: bool = False):
        self.settings = settings or EngineConfig()
        self.debug = debug
        configure_logging(debug)
        _logger.info("Engine initialized. out=%s threads=%d", self.settings.out_dir, self.settings.threads)

    def load(self, ref: Union[str, Path]) -> ScenarioConfig:
        return load_scenario(resolve_scenario(ref))

    def _writer(self, cfg: ScenarioConfig, out_dir: Optional[Path]) -> ArtifactWriter:
        # --out wins over the scenario's own directory, which wins over the engine default
        if out_dir is not None:
            base = Path(out_dir)
        elif cfg.output.directory:
            base = Path(cfg.output.directory)
        else:
            base = self.settings.out_dir
        return ArtifactWriter(base / cfg.name, cfg.output.formats)

    def run(self, ref: Union[str, Path], out_dir: Optional[Path] = None) -> RunReport:
        cfg = self.load(ref)
        watch = Stopwatch()
        result = run_pipeline(cfg, self.settings, stopwatch=watch)
        report = result.report
        if cfg.studies.n_sweep:
            with watch.lap("n_sweep"):
                frame = truncation_table(result, self.settings.threads)
                result.tables["truncation"] = frame
                report.add(Check("n_sweep_monotone", bool(frame["monotone"].all()), KIND_EXACT))
        if cfg.studies.refinement:
            with watch.lap("refinement"):
                frame = refinement_table(cfg, self.settings)
                result.tables["refinement"] = frame
                report.sections["refinement"] = refinement_summary(frame)
                for check in refinement_checks(frame, cfg.conventions.feedback_constraint_tol):
                    report.add(check)

        writer = self._writer(cfg, out_dir)
        writer.write_report(report)
        writer.write_table("processes", result.processes())
        if result.path_dependent:
            writer.write_table("trajectories", result.trajectories())
        for name, frame in result.tables.items():
            writer.write_table(name, frame)
        failed = [c.name for c in report.failed()]
        _logger.info(
            "Run %s finished in %.3fs, exit code %d, failed checks: %s",
            cfg.name,
            watch.total(),
            report.exit_code,
            failed or "none",
        )
        return report

    def sweep(self, ref: Union[str, Path], axis: str, out_dir: Optional[Path] = None) -> pd.DataFrame:
        if axis not in SWEEP_AXES:
            raise ValueError(f"Unknown sweep axis '{axis}', expected one of {SWEEP_AXES}")
        cfg = self.load(ref)
        watch = Stopwatch()
        with watch.lap(f"sweep_{axis}"):
            if axis == "N":
                frame = refinement_table(cfg, self.settings)
                _logger.info("Refinement summary: %s", refinement_summary(frame))
                for check in refinement_checks(frame, cfg.conventions.feedback_constraint_tol):
                    log = _logger.info if check.passed else _logger.warning
                    log("Refinement check %s: %s (%s)", check.name, "ok" if check.passed else "FAILED", check.value)
            elif axis == "n":
                frame = truncation_table(run_pipeline(cfg, self.settings), self.settings.threads)
            else:
                if cfg.studies.perturbation_count == 0:
                    studies = cfg.studies.model_copy(update={"perturbation_count": SWEEP_PERTURBATIONS})
                    cfg = cfg.model_copy(update={"studies": studies})
                frame = run_pipeline(cfg, self.settings).tables.get("perturbation", pd.DataFrame())
        self._writer(cfg, out_dir).write_table(f"sweep_{axis}", frame)
        _logger.info("Sweep %s over %s: %d rows in %.3fs", cfg.name, axis, len(frame), watch.total())
        return frame

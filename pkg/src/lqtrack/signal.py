"""Optimal signal process and its companions.

The signal is the target the optimal controller tracks:

    xihat_k = E[XiT L_T + sum_{r>=k} xi_r nu_r dt R_r | node] / L_k

where R_r is the running weight supplied by `LProcess`. One backward sweep
of conditional expectations produces the numerator S_k; the running-target
integral Y and the martingale Mtilde = S + Y follow along paths, so that
xihat * L = Mtilde - Y holds node by node.
"""
from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from src.lqtrack.coefficients import CoefficientSet
from src.lqtrack.config import EXACT_TOL
from src.lqtrack.errors import ConsistencyError
from src.lqtrack.lattice import AdaptedProcess, ScenarioTree, quadratic_variation
from src.lqtrack.logger import get_logger
from src.lqtrack.riccati import LProcess, RiccatiSolution

_logger = get_logger("signal")


@dataclass(eq=False)
class SignalProcess:
    xi_hat: AdaptedProcess
    M_tilde: AdaptedProcess
    Y: AdaptedProcess
    b: AdaptedProcess
    qv: AdaptedProcess
    numerator: AdaptedProcess
    xi_T: np.ndarray
    L_T: np.ndarray
    w: Optional[AdaptedProcess] = None

    def identity_residual(self, L: AdaptedProcess) -> float:
        """max |xihat L - (Mtilde - Y)| relative to |Mtilde| + |Y|."""
        worst = 0.0
        for k in range(self.xi_hat.last_level + 1):
            lhs = self.xi_hat.level(k) * L.level(k)
            rhs = self.M_tilde.level(k) - self.Y.level(k)
            scale = np.abs(self.M_tilde.level(k)) + np.abs(self.Y.level(k)) + 1e-300
            worst = max(worst, float(np.max(np.abs(lhs - rhs) / scale)))
        return worst

    def martingale_residual(self) -> float:
        """Largest |E[ΔMtilde | node]| over interior steps."""
        tree = self.M_tilde.tree
        worst = 0.0
        for k in range(self.M_tilde.last_level):
            drift = tree.conditional_expectation(self.M_tilde.level(k + 1), k) - self.M_tilde.level(k)
            worst = max(worst, float(np.max(np.abs(drift))))
        return worst

    def terminal_gap(self) -> float:
        """max |xihat_{N-1} - XiT| over nodes with L_T > 0 (0 if there are none)."""
        mask = self.L_T > 0
        if not np.any(mask):
            return 0.0
        last = self.xi_hat.level(self.xi_hat.last_level)
        return float(np.max(np.abs(last[mask] - self.xi_T[mask])))


def compute_signal(
    tree: ScenarioTree, coeffs: CoefficientSet, riccati: RiccatiSolution, l: LProcess
) -> SignalProcess:
    tree.require_paths("compute_signal")
    dt = tree.dt
    last = tree.steps - 1
    terminal_term = coeffs.xi_T * l.L_T
    if not np.all(np.isfinite(terminal_term)):
        raise ConsistencyError("XiT * L_T is not finite on every terminal-adjacent node")

    charge = [coeffs.xi.level(k) * coeffs.nu.level(k) * dt * l.running_weight.level(k) for k in range(tree.steps)]
    numerator: List[np.ndarray] = [np.empty(0)] * tree.steps
    numerator[last] = terminal_term + charge[last]
    for k in range(last - 1, -1, -1):
        numerator[k] = charge[k] + tree.conditional_expectation(numerator[k + 1], k)

    xi_hat = []
    for k in range(tree.steps):
        L = l.L.level(k)
        if np.any(L <= 0):
            i = int(np.argmax(L <= 0))
            raise ConsistencyError(f"L vanishes at interior node {tree.node_id(k, i)}; the signal is undefined there")
        xi_hat.append(numerator[k] / L)

    Y = [np.zeros(1)]
    for k in range(last):
        Y.append(tree.carry_forward(Y[k] + charge[k], k))
    M = [numerator[k] + Y[k] for k in range(tree.steps)]

    xi_hat_proc = AdaptedProcess(tree, xi_hat, name="xi_hat")
    signal = SignalProcess(
        xi_hat=xi_hat_proc,
        M_tilde=AdaptedProcess(tree, M, name="M_tilde"),
        Y=AdaptedProcess(tree, Y, name="Y"),
        b=riccati.c * xi_hat_proc,
        qv=quadratic_variation(xi_hat_proc),
        numerator=AdaptedProcess(tree, numerator, name="S"),
        xi_T=np.asarray(coeffs.xi_T, dtype=float),
        L_T=np.asarray(l.L_T, dtype=float),
    )
    signal.b.name = "b"
    weights = compute_weight(signal, l, tree, coeffs)
    signal.w = weights.w
    _logger.debug("Signal: xi_hat_0=%.17g w_0=%.17g", xi_hat[0][0], weights.w.level(0)[0])
    return signal


@dataclass(eq=False)
class WeightReport:
    w: AdaptedProcess
    w_alternative: AdaptedProcess
    kernel_residual: AdaptedProcess
    max_kernel_residual: float
    alternative_max_diff: float
    w_in_range: bool
    terminal_weight_gap: float
    q_density: Optional[AdaptedProcess] = None
    representation_residual: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "w_0": float(self.w.level(0)[0]),
            "max_kernel_residual": self.max_kernel_residual,
            "alternative_max_diff": self.alternative_max_diff,
            "w_in_range": self.w_in_range,
            "terminal_weight_gap": self.terminal_weight_gap,
            "representation_residual": self.representation_residual,
        }


def compute_weight(
    signal: SignalProcess, l: LProcess, tree: ScenarioTree, coeffs: CoefficientSet, tol: float = EXACT_TOL
) -> WeightReport:
    """Weight w = E[L_T | node] / L, the kernel residual and the Q-measure representation."""
    dt = tree.dt
    last = tree.steps - 1
    expected_LT = [tree.condition_down(l.L_T, last, k) for k in range(tree.steps)]

    mass: List[np.ndarray] = [np.empty(0)] * tree.steps
    target_mass: List[np.ndarray] = [np.empty(0)] * tree.steps
    for k in range(last, -1, -1):
        step = coeffs.nu.level(k) * dt * l.running_weight.level(k)
        ahead = 0.0 if k == last else tree.conditional_expectation(mass[k + 1], k)
        ahead_target = 0.0 if k == last else tree.conditional_expectation(target_mass[k + 1], k)
        mass[k] = step + ahead
        target_mass[k] = step * coeffs.xi.level(k) + ahead_target

    w, w_alt, residual = [], [], []
    in_range = True
    for k in range(tree.steps):
        L = l.L.level(k)
        wk = expected_LT[k] / L
        if np.any(wk > 1 + tol):
            i = int(np.argmax(wk))
            raise ConsistencyError(f"Weight exceeds one at node {tree.node_id(k, i)}: w={wk[i]!r}")
        stuck = (wk >= 1.0) & (mass[k] > tol * L)
        if np.any(stuck):
            i = int(np.argmax(stuck))
            raise ConsistencyError(f"Weight reaches one at node {tree.node_id(k, i)} with running-target mass left")
        w.append(wk)
        w_alt.append(1.0 - mass[k] / L)
        one_minus = 1.0 - wk
        with np.errstate(divide="ignore", invalid="ignore"):
            res = np.abs(mass[k] / (one_minus * L) - 1.0)
        residual.append(np.where((one_minus > 0) & (mass[k] > 0), res, 0.0))
        # w = 1 only where no discounted running mass is left (see `stuck`)
        if np.any(wk < -tol):
            in_range = False

    max_residual = max(float(np.max(r)) for r in residual)
    alt_diff = max(float(np.max(np.abs(a - b))) for a, b in zip(w, w_alt))
    mask = l.L_T > 0
    gap = float(np.max(np.abs(w[last][mask] - 1.0))) if np.any(mask) else 0.0

    report = WeightReport(
        w=AdaptedProcess(tree, w, name="w"),
        w_alternative=AdaptedProcess(tree, w_alt, name="w_alt"),
        kernel_residual=AdaptedProcess(tree, residual, name="kernel_residual"),
        max_kernel_residual=max_residual,
        alternative_max_diff=alt_diff,
        w_in_range=in_range,
        terminal_weight_gap=gap,
    )

    total_LT = float(expected_LT[0][0])
    if total_LT > 0:
        report.q_density = AdaptedProcess(tree, [e / total_LT for e in expected_LT], name="q_density")
        worst = 0.0
        for k in range(tree.steps):
            wk = w[k]
            xi_T_weighted = tree.condition_down(signal.xi_T * l.L_T, last, k)
            with np.errstate(divide="ignore", invalid="ignore"):
                q_mean = np.where(expected_LT[k] > 0, xi_T_weighted / expected_LT[k], 0.0)
                kernel_avg = np.where(mass[k] > 0, target_mass[k] / mass[k], 0.0)
            rebuilt = wk * q_mean + (1.0 - wk) * kernel_avg
            xh = signal.xi_hat.level(k)
            worst = max(worst, float(np.max(np.abs(rebuilt - xh) / np.maximum(1.0, np.abs(xh)))))
        report.representation_residual = worst
    return report


@dataclass(eq=False)
class BReport:
    b: AdaptedProcess
    residual: AdaptedProcess
    max_residual: float
    max_residual_over_dt2: float
    terminal_gap: Optional[float]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "b_0": float(self.b.level(0)[0]),
            "max_residual": self.max_residual,
            "max_residual_over_dt2": self.max_residual_over_dt2,
            "terminal_gap": self.terminal_gap,
        }


def compute_b(signal: SignalProcess, riccati: RiccatiSolution) -> BReport:
    """b = c * xihat and its drift mismatch against (c/kappa b - nu xi) dt."""
    tree = riccati.tree
    coeffs = riccati.coeffs
    dt = tree.dt
    last = tree.steps - 1
    b = signal.b
    finite_terminal = np.isfinite(riccati.terminal_values)
    b_T = np.where(finite_terminal, riccati.terminal_values, 0.0) * signal.xi_T
    residual = []
    for k in range(tree.steps):
        bk = b.level(k)
        if k < last:
            ahead = tree.conditional_expectation(b.level(k + 1), k)
            valid = np.ones_like(bk, dtype=bool)
        else:
            ahead = b_T
            valid = finite_terminal
        drift = (riccati.gain(k) * bk - coeffs.nu.level(k) * coeffs.xi.level(k)) * dt
        residual.append(np.where(valid, np.abs(ahead - bk - drift), 0.0))
    worst = max(float(np.max(r)) for r in residual)
    gap = float(np.max(np.abs(b.level(last) - b_T)[finite_terminal])) if np.any(finite_terminal) else None
    return BReport(b, AdaptedProcess(tree, residual, name="b_residual"), worst, worst / dt ** 2, gap)


def predictability_functional(XiT: np.ndarray, tree: ScenarioTree) -> float:
    """sum_{k<N-1} E[(XiT - E[XiT | F_k])^2] / (T - t_k)^2 dt."""
    last = tree.steps - 1
    XiT = np.asarray(XiT, dtype=float)
    togo = tree.grid.time_to_go
    cond_var = np.zeros(tree.level_size(last))
    cond_mean = XiT
    total = 0.0
    for k in range(last - 1, -1, -1):
        mean_k = tree.conditional_expectation(cond_mean, k)
        edges = tree.child_values(cond_mean, k) - mean_k[:, None]
        spread = np.sum(tree.transition_probabilities(k) * edges ** 2, axis=1)
        cond_var = tree.conditional_expectation(cond_var, k) + spread
        total += tree.expectation(cond_var, k) / togo[k] ** 2 * tree.dt
        cond_mean = mean_k
    return total


def refinement_trend(values: Sequence[float], ratio: float = 0.75) -> str:
    """'stabilizing' when successive changes shrink geometrically, else 'growing'."""
    diffs = [abs(b - a) for a, b in zip(values, values[1:])]
    if len(diffs) < 2:
        return "undetermined"
    if all(d == 0 for d in diffs):
        return "stabilizing"
    shrinking = all(d2 <= ratio * d1 or d2 == 0 for d1, d2 in zip(diffs, diffs[1:]))
    return "stabilizing" if shrinking else "growing"

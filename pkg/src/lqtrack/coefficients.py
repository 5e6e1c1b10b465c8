"""Problem data of the tracking problem and the coefficient model catalog.

The five node-valued inputs live here:

* ``nu``     risk weight of the running tracking cost, >= 0, levels 0..N-1
* ``kappa``  control cost, > 0, levels 0..N-1
* ``xi``     running target, levels 0..N-1 (value at a node applies over the
             following step)
* ``XiT``    terminal target, level N-1 (known one step before the horizon)
* ``eta``    terminal penalty weight in [0, +inf], level N-1; ``inf`` marks
             the hard terminal constraint and is never replaced by a big
             number

`ModelSpec` is a tagged union of pydantic models so scenario files can
describe every slot declaratively; `materialize` turns a spec into an
`AdaptedProcess` on a given tree.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import math
from typing import Annotated, Any, Dict, List, Literal, Mapping, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.lqtrack.errors import LatticeError, ValidationFailure
from src.lqtrack.lattice import AdaptedProcess, ScenarioTree
from src.lqtrack.logger import get_logger

_logger = get_logger("coefficients")

INFINITY = math.inf


class Slot(str, Enum):
    NU = "nu"
    KAPPA = "kappa"
    XI = "xi"
    XI_T = "XiT"
    ETA = "eta"

    @property
    def terminal(self) -> bool:
        return self in (Slot.XI_T, Slot.ETA)


_SLOT_SEED_OFFSET = {Slot.NU: 1, Slot.KAPPA: 2, Slot.XI: 3, Slot.XI_T: 4, Slot.ETA: 5}


class _SpecBase(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    @field_validator("*", mode="after")
    @classmethod
    def _no_nan(cls, value: Any) -> Any:
        if isinstance(value, float) and math.isnan(value):
            raise ValueError("NaN is not a valid coefficient value")
        return value


class ConstantSpec(_SpecBase):
    kind: Literal["constant"] = "constant"
    value: float


class DeterministicFnSpec(_SpecBase):
    """One value per time level; level k uses ``values[k]``."""

    kind: Literal["deterministic"] = "deterministic"
    values: List[float] = Field(min_length=1)


class GeometricSpec(_SpecBase):
    """initial * up^(#up moves) * down^(#down moves) along the path."""

    kind: Literal["geometric"] = "geometric"
    initial: float
    up: float = Field(gt=0)
    down: float = Field(gt=0)


class NodeTableSpec(_SpecBase):
    kind: Literal["node_table"] = "node_table"
    values: List[List[float]] = Field(min_length=1)


class RandomWalkSpec(_SpecBase):
    kind: Literal["random_walk"] = "random_walk"
    initial: float = 0.0
    scale: float = 1.0


class BranchSignSpec(_SpecBase):
    """offset + scale * sign of the move taken into ``level``.

    Negative levels count from the last decision level (-1 is level N-1).
    Before the move is revealed the value is ``offset``.
    """

    kind: Literal["branch_sign"] = "branch_sign"
    level: int
    scale: float = 1.0
    offset: float = 0.0


class RandomUniformSpec(_SpecBase):
    kind: Literal["uniform"] = "uniform"
    low: float
    high: float
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _ordered(self) -> "RandomUniformSpec":
        if not self.high >= self.low:
            raise ValueError(f"high ({self.high}) must not be below low ({self.low})")
        return self


ModelSpec = Annotated[
    Union[
        ConstantSpec,
        DeterministicFnSpec,
        GeometricSpec,
        NodeTableSpec,
        RandomWalkSpec,
        BranchSignSpec,
        RandomUniformSpec,
    ],
    Field(discriminator="kind"),
]


def _spec_level(spec: Any, tree: ScenarioTree, slot: Slot, k: int) -> np.ndarray:
    size = tree.level_size(k)
    if isinstance(spec, ConstantSpec):
        return np.full(size, spec.value)
    if isinstance(spec, DeterministicFnSpec):
        if len(spec.values) < tree.steps:
            raise ValidationFailure(
                f"{slot.value}: deterministic table has {len(spec.values)} entries, needs {tree.steps}",
                slot=slot.value,
            )
        return np.full(size, spec.values[k])
    if isinstance(spec, GeometricSpec):
        ups, downs = tree.move_counts(k)
        return spec.initial * np.power(spec.up, ups) * np.power(spec.down, downs)
    if isinstance(spec, NodeTableSpec):
        if k >= len(spec.values) or len(spec.values[k]) != size:
            got = len(spec.values[k]) if k < len(spec.values) else 0
            raise ValidationFailure(
                f"{slot.value}: node table level {k} has {got} values, tree has {size} nodes",
                slot=slot.value,
            )
        return np.asarray(spec.values[k], dtype=float)
    if isinstance(spec, RandomWalkSpec):
        return spec.initial + spec.scale * tree.cumulative_noise(k)
    if isinstance(spec, BranchSignSpec):
        reveal = spec.level if spec.level >= 0 else tree.steps + spec.level
        if not 1 <= reveal <= tree.steps - 1:
            raise ValidationFailure(f"{slot.value}: branch_sign level {spec.level} is outside 1..N-1", slot=slot.value)
        if k < reveal:
            return np.full(size, spec.offset)
        try:
            moves = np.sign(tree.arrival_increment(reveal))
        except LatticeError as e:
            raise ValidationFailure(f"{slot.value}: {e}", slot=slot.value) from e
        return spec.offset + spec.scale * moves[tree.ancestor_index(k, reveal)]
    raise ValidationFailure(f"{slot.value}: unsupported model spec {type(spec).__name__}", slot=slot.value)


def materialize(spec: Any, tree: ScenarioTree, slot: Slot) -> AdaptedProcess:
    """Build the node-valued process of `slot` on levels 0..N-1 and check its sign constraint."""
    levels = tree.steps
    if isinstance(spec, RandomUniformSpec):
        seed = spec.seed if spec.seed is not None else tree.seed * 10 + _SLOT_SEED_OFFSET[slot]
        rng = np.random.default_rng(seed)
        values = [rng.uniform(spec.low, spec.high, tree.level_size(k)) for k in range(levels)]
    else:
        values = [_spec_level(spec, tree, slot, k) for k in range(levels)]
    proc = AdaptedProcess(tree, values, name=slot.value)
    check_sign(proc, slot)
    return proc


def check_sign(proc: AdaptedProcess, slot: Slot) -> None:
    first = proc.last_level if slot.terminal else 0
    for k in range(first, proc.last_level + 1):
        v = proc.level(k)
        if slot is Slot.NU:
            bad = ~np.isfinite(v) | (v < 0)
            rule = "finite and >= 0"
        elif slot is Slot.KAPPA:
            bad = ~np.isfinite(v) | (v <= 0)
            rule = "finite and > 0"
        elif slot is Slot.ETA:
            bad = np.isnan(v) | (v < 0)
            rule = "in [0, inf]"
        else:
            bad = ~np.isfinite(v)
            rule = "finite"
        if np.any(bad):
            i = int(np.argmax(bad))
            node = int(proc.tree.node_id(k, i))
            raise ValidationFailure(
                f"{slot.value} must be {rule}; node {node} (level {k}) has {v[i]!r}",
                slot=slot.value,
                node_id=node,
            )


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    tree: ScenarioTree
    nu: AdaptedProcess
    kappa: AdaptedProcess
    xi: AdaptedProcess
    xi_T: np.ndarray
    eta: np.ndarray
    x0: float

    @property
    def constrained(self) -> np.ndarray:
        """Level-(N-1) mask of the hard-constraint nodes (eta = inf)."""
        return np.isinf(self.eta)

    def truncated_eta(self, n: float) -> np.ndarray:
        if not (n >= 0 and math.isfinite(n)):
            raise ValueError(f"Truncation level must be finite and >= 0, got {n}")
        return np.minimum(self.eta, n)

    def is_deterministic(self) -> bool:
        """True when every slot takes one value per level."""
        for proc in (self.nu, self.kappa, self.xi):
            for v in proc.levels():
                if np.ptp(v) != 0:
                    return False
        return bool(np.ptp(self.xi_T) == 0 and np.all(self.eta == self.eta[0]))

    def level_constants(self) -> Dict[str, np.ndarray]:
        """Per-level values of nu, kappa and xi (meaningful when deterministic)."""
        return {
            "nu": np.array([v[0] for v in self.nu.levels()]),
            "kappa": np.array([v[0] for v in self.kappa.levels()]),
            "xi": np.array([v[0] for v in self.xi.levels()]),
        }


def build_coefficients(tree: ScenarioTree, specs: Mapping[Slot, Any], x0: float) -> CoefficientSet:
    missing = [s.value for s in Slot if s not in specs]
    if missing:
        raise ValidationFailure(f"Missing coefficient specs: {', '.join(missing)}")
    if not math.isfinite(x0):
        raise ValidationFailure(f"x0 must be finite, got {x0!r}", slot="x0")
    procs = {slot: materialize(specs[slot], tree, slot) for slot in Slot}
    last = tree.steps - 1
    return CoefficientSet(
        tree=tree,
        nu=procs[Slot.NU],
        kappa=procs[Slot.KAPPA],
        xi=procs[Slot.XI],
        xi_T=np.array(procs[Slot.XI_T].level(last)),
        eta=np.array(procs[Slot.ETA].level(last)),
        x0=float(x0),
    )


@dataclass
class ConditionCheck:
    name: str
    passed: bool
    witness: Optional[int] = None
    detail: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "passed": self.passed, "witness": self.witness, "detail": self.detail}


@dataclass
class ValidationReport:
    checks: List[ConditionCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> List[ConditionCheck]:
        return [c for c in self.checks if not c.passed]

    def get(self, name: str) -> ConditionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


def _first_bad(tree: ScenarioTree, bad_levels: List[np.ndarray]) -> Optional[int]:
    for k, bad in enumerate(bad_levels):
        if np.any(bad):
            return int(tree.node_id(k, int(np.argmax(bad))))
    return None


def degenerate_probability(coeffs: CoefficientSet) -> List[np.ndarray]:
    """P[eta = 0 and no nu-mass left from level k on | node] for k = 0..N-1."""
    tree = coeffs.tree
    last = tree.steps - 1
    prob = ((coeffs.eta == 0) & (coeffs.nu.level(last) == 0)).astype(float)
    out = [prob]
    for k in range(last - 1, -1, -1):
        ahead = tree.conditional_expectation(out[0], k)
        out.insert(0, np.where(coeffs.nu.level(k) == 0, ahead, 0.0))
    return out


def validate(coeffs: CoefficientSet) -> ValidationReport:
    """Report-style check of the well-posedness conditions; never raises."""
    tree = coeffs.tree
    dt = tree.dt
    checks: List[ConditionCheck] = []

    bad = [
        ~np.isfinite(nu) | (nu < 0) | ~np.isfinite(ka) | (ka <= 0)
        for nu, ka in zip(coeffs.nu.levels(), coeffs.kappa.levels())
    ]
    witness = _first_bad(tree, bad)
    checks.append(
        ConditionCheck(
            "nu_kappa_integrable",
            witness is None,
            witness,
            "sum of (nu + 1/kappa) dt is finite on every path" if witness is None else "nu < 0 or kappa <= 0",
        )
    )

    bad = [~np.isfinite(xi) | ~np.isfinite(xi * xi * nu * dt) for xi, nu in zip(coeffs.xi.levels(), coeffs.nu.levels())]
    bad_terminal = ~np.isfinite(coeffs.xi_T)
    witness = _first_bad(tree, bad)
    if witness is None and np.any(bad_terminal):
        witness = int(tree.node_id(tree.steps - 1, int(np.argmax(bad_terminal))))
    checks.append(ConditionCheck("targets_integrable", witness is None, witness, "xi, XiT finite; xi^2 nu dt finite"))

    bad_eta = np.isnan(coeffs.eta) | (coeffs.eta < 0)
    witness = None if not np.any(bad_eta) else int(tree.node_id(tree.steps - 1, int(np.argmax(bad_eta))))
    checks.append(ConditionCheck("eta_range", witness is None, witness, "eta in [0, inf]"))

    probs = degenerate_probability(coeffs)
    bad = [p > 1.0 - 1e-12 for p in probs]
    witness = _first_bad(tree, bad)
    count = int(sum(int(np.sum(b)) for b in bad))
    checks.append(
        ConditionCheck(
            "nondegenerate_terminal",
            witness is None,
            witness,
            "P[eta = 0, no remaining nu | node] < 1 everywhere"
            if witness is None
            else f"{count} node(s) where eta = 0 and nu vanishes on the whole remaining horizon",
        )
    )

    report = ValidationReport(checks)
    for c in report.failures():
        _logger.warning("Validation check %s failed at node %s: %s", c.name, c.witness, c.detail)
    return report

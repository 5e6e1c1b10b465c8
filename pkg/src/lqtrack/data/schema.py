"""Scenario file schema.

A scenario is a YAML document validated by `ScenarioConfig`. Unknown keys are
rejected everywhere so typos surface as errors with a field path.
"""
from __future__ import annotations

import math
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.lqtrack.coefficients import ConstantSpec, ModelSpec, Slot
from src.lqtrack.config import CONSTRAINT_TOL, DEFAULT_TRUNCATION_LEVELS, JC_WINDOW
from src.lqtrack.riccati import Discounting, UpperBoundHypotheses


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(_Block):
    T: float = Field(gt=0)
    steps: int = Field(ge=1)

    @field_validator("T")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("horizon must be finite")
        return value


class TreeConfig(_Block):
    branching: int = Field(2, ge=2)
    seed: int = 0
    recombining: bool = False

    @model_validator(mode="after")
    def _binary_walk(self) -> "TreeConfig":
        if self.recombining and self.branching != 2:
            raise ValueError("a recombining lattice is a binary walk (branching 2)")
        return self


class CoefficientsConfig(_Block):
    nu: ModelSpec
    kappa: ModelSpec
    xi: ModelSpec = ConstantSpec(value=0.0)
    XiT: ModelSpec = ConstantSpec(value=0.0)
    eta: ModelSpec

    def by_slot(self) -> dict:
        return {slot: getattr(self, slot.value) for slot in Slot}


class GridSearchConfig(_Block):
    x_min: float
    x_max: float
    x_points: int = Field(41, ge=3)
    u_min: float
    u_max: float
    u_points: int = Field(81, ge=3)

    @model_validator(mode="after")
    def _ranges(self) -> "GridSearchConfig":
        if not (self.x_max > self.x_min and self.u_max > self.u_min):
            raise ValueError("grid ranges must have max > min")
        return self


class StudiesConfig(_Block):
    refinement: List[int] = Field(default_factory=list)
    n_sweep: bool = True
    perturbation_count: int = Field(0, ge=0)
    perturbation_seed: int = 0
    perturbation_scale: float = Field(0.5, gt=0)
    bounds_check: bool = True
    integrability_check: bool = True
    predictability: bool = True
    grid_search: Optional[GridSearchConfig] = None

    @field_validator("refinement")
    @classmethod
    def _positive_steps(cls, value: List[int]) -> List[int]:
        if any(n < 1 for n in value):
            raise ValueError("refinement step counts must be >= 1")
        return sorted(set(value))


class OutputConfig(_Block):
    directory: Optional[str] = None
    formats: List[Literal["json", "csv"]] = Field(default_factory=lambda: ["json", "csv"])


class ConventionsConfig(_Block):
    discounting: Discounting = Discounting.PRODUCT
    # attainment tolerance for feedback policies on constrained nodes
    feedback_constraint_tol: float = Field(1e-6, gt=0)
    oracle_constraint_tol: float = Field(CONSTRAINT_TOL, gt=0)
    jc_window: int = Field(JC_WINDOW, ge=1)


class UpperBoundConfig(_Block):
    kappa_min: float = Field(gt=0)
    kappa_max: float = Field(gt=0)
    nu_bound: float = Field(ge=0)
    eta_min: float = Field(gt=0)

    def hypotheses(self) -> UpperBoundHypotheses:
        return UpperBoundHypotheses(self.kappa_min, self.kappa_max, self.nu_bound, self.eta_min)


class ScenarioConfig(_Block):
    name: str = Field(min_length=1)
    description: str = ""
    grid: GridConfig
    tree: TreeConfig = Field(default_factory=TreeConfig)
    coefficients: CoefficientsConfig
    x0: float
    truncation_levels: List[float] = Field(default_factory=lambda: list(DEFAULT_TRUNCATION_LEVELS))
    studies: StudiesConfig = Field(default_factory=StudiesConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    conventions: ConventionsConfig = Field(default_factory=ConventionsConfig)
    upper_bound: Optional[UpperBoundConfig] = None

    @field_validator("x0")
    @classmethod
    def _finite_x0(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("x0 must be finite")
        return value

    @field_validator("truncation_levels")
    @classmethod
    def _increasing(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("at least one truncation level is needed")
        if any(not (math.isfinite(n) and n >= 0) for n in value):
            raise ValueError("truncation levels must be finite and >= 0")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("truncation levels must be strictly increasing")
        return value

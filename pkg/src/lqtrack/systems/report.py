"""Run report assembly and deterministic JSON serialization.

The report is an envelope ``{"metadata": ..., "payload": ...}``. Metadata
carries no timestamp, so the same scenario and engine version give the same
bytes. JSON floats use Python's shortest round-trip representation;
non-finite floats are written as the strings "inf", "-inf", "nan". CSV
tables use `format_float` (17 significant digits).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import json
import logging
import math
from typing import Any, Dict, List, Optional

import numpy as np

from src.lqtrack.config import ENGINE_VERSION, FLOAT_DIGITS
from src.lqtrack.errors import EXIT_CONSISTENCY, EXIT_OK
from src.lqtrack.logger import get_logger

_logger = get_logger("report")

REPORT_SCHEMA_VERSION = 1

KIND_EXACT = "exact"
KIND_BOUND = "bound"
KIND_SOFT = "soft"


def format_float(value: float) -> str:
    """17 significant digits, which round-trips every double."""
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.{FLOAT_DIGITS}g}"


def jsonable(obj: Any) -> Any:
    """Plain JSON types from numpy scalars/arrays, enums and report objects."""
    if hasattr(obj, "to_dict") and callable(obj.to_dict):
        return jsonable(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else format_float(value)
    return obj


@dataclass
class Check:
    name: str
    passed: bool
    kind: str = KIND_EXACT
    value: Optional[float] = None
    tolerance: Optional[float] = None
    witness: Optional[int] = None
    detail: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "passed": self.passed,
            "value": self.value,
            "tolerance": self.tolerance,
            "witness": self.witness,
            "detail": self.detail,
        }


def within(name: str, value: float, tolerance: float, kind: str = KIND_EXACT, **extra: Any) -> Check:
    """A check that passes when `value` is finite and at most `tolerance`."""
    value = float(value)
    return Check(name, math.isfinite(value) and value <= tolerance, kind, value, tolerance, **extra)


@dataclass
class RunReport:
    scenario: Dict[str, Any]
    sections: Dict[str, Any] = field(default_factory=dict)
    checks: List[Check] = field(default_factory=list)

    def add(self, check: Check) -> Check:
        self.checks.append(check)
        if not check.passed:
            level = logging.ERROR if check.kind == KIND_EXACT else logging.WARNING
            _logger.log(level, "Check %s failed: value=%s tol=%s %s", check.name, check.value, check.tolerance, check.detail)
        return check

    def failed(self, kind: Optional[str] = None) -> List[Check]:
        return [c for c in self.checks if not c.passed and (kind is None or c.kind == kind)]

    @property
    def exit_code(self) -> int:
        return EXIT_CONSISTENCY if self.failed(KIND_EXACT) or self.failed(KIND_BOUND) else EXIT_OK

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"scenario": self.scenario}
        payload.update(self.sections)
        payload["checks"] = [c.to_dict() for c in self.checks]
        payload["exit_code"] = self.exit_code
        return payload


def build_envelope(scenario_name: str, payload: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "metadata": {
            "engine_version": ENGINE_VERSION,
            "schema_version": REPORT_SCHEMA_VERSION,
            "scenario": scenario_name,
        },
        "payload": payload,
    }


def dumps_report(report: RunReport) -> str:
    envelope = build_envelope(report.scenario.get("name", ""), report.to_dict())
    return json.dumps(jsonable(envelope), indent=2, ensure_ascii=False, allow_nan=False) + "\n"

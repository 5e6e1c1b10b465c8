"""Exception types shared across the engine.

Every error carries the process exit code the launcher should use, so the
command line can map failures without inspecting messages.
"""
from __future__ import annotations

from typing import Optional


EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_VALIDATION = 2
EXIT_CONSISTENCY = 3


class EngineError(Exception):
    exit_code: int = EXIT_UNEXPECTED


class ConfigError(EngineError):
    """Scenario file could not be read or does not match the schema."""

    exit_code = EXIT_VALIDATION

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class ValidationFailure(EngineError):
    """Problem data violates a sign constraint or a well-posedness condition."""

    exit_code = EXIT_VALIDATION

    def __init__(self, message: str, slot: Optional[str] = None, node_id: Optional[int] = None):
        self.slot = slot
        self.node_id = node_id
        super().__init__(message)


class LatticeError(EngineError):
    exit_code = EXIT_VALIDATION


class ConsistencyError(EngineError):
    """An identity that must hold exactly did not; this indicates a bug."""

    exit_code = EXIT_CONSISTENCY


class ConvergenceError(EngineError):
    exit_code = EXIT_CONSISTENCY


class ArtifactError(EngineError):
    exit_code = EXIT_UNEXPECTED

"""Numerical engine for stochastic LQ tracking with a partially singular terminal constraint.

Entry points live in `src.lqtrack.main` (command line) and `src.lqtrack.app`
(`Engine`, `run_pipeline`).
"""
from src.lqtrack.config import ENGINE_VERSION

__version__ = ENGINE_VERSION

__all__ = ["app", "main", "lattice", "coefficients", "riccati", "signal", "controller", "oracle"]

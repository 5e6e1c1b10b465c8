"""Configuration defaults and constants for the engine.

Keep this file light: constants plus a small EngineConfig dataclass. A few
defaults can be overridden from the environment (or a `.env` file in the
working directory) through `LQTRACK_*` variables.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import os
from typing import Optional

from dotenv import load_dotenv


MAX_TREE_NODES: int = 2 ** 22
EXACT_TOL: float = 1e-12
DOMINATION_TOL: float = 1e-9
CONSTRAINT_TOL: float = 1e-9
MONOTONE_CONVERGED_TOL: float = 1e-10
SUPERMARTINGALE_TOL: float = 1e-12  # relative
ODE_REL_TOL: float = 1e-9
ODE_MAX_HALVINGS: int = 16
JC_WINDOW: int = 8
FLOAT_DIGITS: int = 17
DEFAULT_TRUNCATION_LEVELS = (1.0, 10.0, 100.0, 1000.0, 10000.0)
DEFAULT_OUT_DIR = Path("out")
DEFAULT_THREADS: int = 1

ENGINE_VERSION = "0.3.0"


@dataclass
class EngineConfig:
    out_dir: Path = DEFAULT_OUT_DIR
    threads: int = DEFAULT_THREADS
    max_tree_nodes: int = MAX_TREE_NODES
    exact_tol: float = EXACT_TOL
    domination_tol: float = DOMINATION_TOL

    @classmethod
    def from_env(cls, env_file: Optional[Path] = None, **overrides) -> "EngineConfig":
        """Build a config from defaults, `LQTRACK_*` variables and explicit overrides.

        Explicit keyword overrides win over the environment; `None` values are
        ignored so argparse defaults can be passed straight through.
        """
        load_dotenv(dotenv_path=env_file, override=False)
        cfg = cls()
        if "LQTRACK_OUT_DIR" in os.environ:
            cfg.out_dir = Path(os.environ["LQTRACK_OUT_DIR"])
        if "LQTRACK_THREADS" in os.environ:
            cfg.threads = int(os.environ["LQTRACK_THREADS"])
        if "LQTRACK_MAX_TREE_NODES" in os.environ:
            cfg.max_tree_nodes = int(os.environ["LQTRACK_MAX_TREE_NODES"])
        for key, value in overrides.items():
            if value is None:
                continue
            if not hasattr(cfg, key):
                raise AttributeError(f"Unknown engine setting: {key}")
            setattr(cfg, key, Path(value) if key == "out_dir" else value)
        cfg.threads = max(1, int(cfg.threads))
        return cfg

"""Artifact files of a run: report.json plus CSV tables.

Every file goes through `atomic_write_text`, so a crash never leaves a
half-written artifact and the previous run survives as ``<name>.bak``.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from src.lqtrack.config import FLOAT_DIGITS
from src.lqtrack.controller import TrajectoryBundle
from src.lqtrack.lattice import AdaptedProcess, ScenarioTree
from src.lqtrack.logger import get_logger
from src.lqtrack.systems.report import RunReport, dumps_report
from src.lqtrack.utils.fs import atomic_write_text, ensure_dir_exists

_logger = get_logger("artifacts")

PROCESS_COLUMNS = ["t", "node_id", "c", "L", "xi_hat", "w", "b", "X_hat", "u_hat"]
TRAJECTORY_COLUMNS = ["policy", "path_id", "k", "t", "X", "u"]

CSV_FLOAT_FORMAT = f"%.{FLOAT_DIGITS}g"


def processes_frame(
    tree: ScenarioTree,
    columns: Mapping[str, Optional[AdaptedProcess]],
) -> pd.DataFrame:
    """One row per node on levels 0..N-1; missing processes give empty cells."""
    times = tree.grid.times
    frames = []
    for k in range(tree.steps):
        size = tree.level_size(k)
        data = {"t": np.full(size, times[k]), "node_id": np.asarray(tree.node_id(k, np.arange(size)))}
        for name in PROCESS_COLUMNS[2:]:
            proc = columns.get(name)
            data[name] = proc.level(k) if proc is not None else np.full(size, np.nan)
        frames.append(pd.DataFrame(data, columns=PROCESS_COLUMNS))
    return pd.concat(frames, ignore_index=True)


def trajectories_frame(bundles: Sequence[TrajectoryBundle]) -> pd.DataFrame:
    """Long format: one row per policy, path and grid time (u is empty at T)."""
    frames = []
    for traj in bundles:
        path_ids, X, u = traj.path_arrays()
        times = traj.tree.grid.times
        n_paths, n_times = X.shape
        controls = np.concatenate([u, np.full((n_paths, 1), np.nan)], axis=1)
        frames.append(
            pd.DataFrame(
                {
                    "policy": traj.policy,
                    "path_id": np.repeat(path_ids, n_times),
                    "k": np.tile(np.arange(n_times), n_paths),
                    "t": np.tile(times, n_paths),
                    "X": X.ravel(),
                    "u": controls.ravel(),
                },
                columns=TRAJECTORY_COLUMNS,
            )
        )
    if not frames:
        return pd.DataFrame(columns=TRAJECTORY_COLUMNS)
    return pd.concat(frames, ignore_index=True)


def frame_to_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")


class ArtifactWriter:
    def __init__(self, out_dir: Path, formats: Iterable[str] = ("json", "csv")):
        self.out_dir = ensure_dir_exists(Path(out_dir))
        self.formats = set(formats)
        self.written: List[Path] = []

    def _write(self, name: str, text: str) -> Path:
        path = atomic_write_text(self.out_dir / name, text)
        self.written.append(path)
        _logger.info("Wrote %s", path)
        return path

    def write_report(self, report: RunReport) -> Optional[Path]:
        if "json" not in self.formats:
            return None
        return self._write("report.json", dumps_report(report))

    def write_table(self, name: str, frame: pd.DataFrame) -> Optional[Path]:
        if "csv" not in self.formats:
            return None
        return self._write(f"{name}.csv", frame_to_csv(frame))

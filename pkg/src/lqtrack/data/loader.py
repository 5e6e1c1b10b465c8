"""Scenario loading: YAML files from disk or from the built-in catalog."""
from __future__ import annotations

from pathlib import Path
import math
from typing import Any, List, Optional, Sequence, Tuple, Union

from pydantic import ValidationError
import yaml

from src.lqtrack.coefficients import CoefficientSet, build_coefficients
from src.lqtrack.config import MAX_TREE_NODES
from src.lqtrack.data.schema import ScenarioConfig
from src.lqtrack.errors import ConfigError
from src.lqtrack.lattice import ScenarioTree, TimeGrid, build_binary_tree, build_recombining_walk
from src.lqtrack.logger import get_logger

_logger = get_logger("data.loader")

CATALOG_DIR = Path(__file__).resolve().parents[3] / "data" / "scenarios"

_INFINITY_WORDS = {"inf": math.inf, "+inf": math.inf, "infinity": math.inf, "-inf": -math.inf, "-infinity": -math.inf}


def _with_infinity(obj: Any) -> Any:
    """Replace the bare words inf / -inf (any case) by floats."""
    if isinstance(obj, dict):
        return {k: _with_infinity(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_with_infinity(v) for v in obj]
    if isinstance(obj, str) and obj.strip().lower() in _INFINITY_WORDS:
        return _INFINITY_WORDS[obj.strip().lower()]
    return obj


def _line_of(text: str, loc: Sequence[Union[str, int]]) -> Optional[int]:
    """1-based line of the deepest YAML node reachable along `loc`."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return None
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            match = next((v for k, v in node.value if k.value == key), None)
            if match is None:
                break
            node = match
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            break
        line = node.start_mark.line + 1
    return line


def parse_scenario(text: str, source: str = "<string>") -> ScenarioConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigError(f"{source}: invalid YAML ({problem})", line=line) from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: a scenario must be a mapping at the top level", line=1)
    try:
        return ScenarioConfig.model_validate(_with_infinity(raw))
    except ValidationError as e:
        first = e.errors()[0]
        loc = [p for p in first["loc"] if not (isinstance(p, str) and p in _UNION_TAGS)]
        field = ".".join(str(p) for p in loc)
        raise ConfigError(f"{source}: {first['msg']}", field=field, line=_line_of(text, loc)) from e


# tag names pydantic inserts into error locations for the discriminated union
_UNION_TAGS = {"constant", "deterministic", "geometric", "node_table", "random_walk", "branch_sign", "uniform"}


def load_scenario(path: Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read scenario file {path}: {e}") from e
    cfg = parse_scenario(text, source=str(path))
    _logger.info("Loaded scenario %s from %s", cfg.name, path)
    return cfg


def list_catalog(catalog_dir: Path = CATALOG_DIR) -> List[Tuple[str, str]]:
    """(name, description) of every shipped scenario, sorted by file name."""
    if not catalog_dir.exists():
        _logger.warning("Scenario catalog not found: %s", catalog_dir)
        return []
    entries = []
    for p in sorted(catalog_dir.glob("*.yaml")):
        cfg = load_scenario(p)
        entries.append((p.stem, cfg.description))
    return entries


def resolve_scenario(ref: Union[str, Path], catalog_dir: Path = CATALOG_DIR) -> Path:
    """A path to an existing file, or the name of a catalog scenario."""
    candidate = Path(ref)
    if candidate.is_file():
        return candidate
    named = catalog_dir / f"{ref}.yaml"
    if named.is_file():
        return named
    raise ConfigError(f"No scenario file or catalog entry named '{ref}'")


def build_problem(
    cfg: ScenarioConfig, steps: Optional[int] = None, max_nodes: int = MAX_TREE_NODES
) -> Tuple[ScenarioTree, CoefficientSet]:
    """Tree and coefficients for `cfg`, optionally on a different number of steps."""
    grid = TimeGrid(cfg.grid.T, steps if steps is not None else cfg.grid.steps)
    if cfg.tree.recombining:
        tree = build_recombining_walk(grid, seed=cfg.tree.seed, max_nodes=max_nodes)
    else:
        tree = build_binary_tree(grid, branching=cfg.tree.branching, seed=cfg.tree.seed, max_nodes=max_nodes)
    coeffs = build_coefficients(tree, cfg.coefficients.by_slot(), cfg.x0)
    return tree, coeffs

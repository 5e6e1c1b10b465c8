"""Finite scenario trees modelling a discrete-time filtration.

A tree is stored level by level: for every level k < N the arrays
``children[k]`` (indices into level k+1), ``probabilities[k]`` and
``increments[k]`` have shape ``(n_k, branching)``. Conditional expectations
are exact finite sums over children, always taken in child-index order so
results do not depend on evaluation order.

Two shapes are supported:

* non-recombining trees (the default): every node has a unique parent, so
  path-dependent quantities (discount products, quadratic variation,
  trajectories) are node functions;
* a recombining binary walk, where level k has k+1 nodes. Only node-local
  operations are meaningful there; path-dependent helpers raise
  `LatticeError`.
"""
from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.lqtrack.config import MAX_TREE_NODES
from src.lqtrack.errors import LatticeError
from src.lqtrack.logger import get_logger

_logger = get_logger("lattice")


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise LatticeError(f"Horizon must be a positive finite time, got {self.horizon!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise LatticeError(f"Number of steps must be a positive integer, got {self.steps!r}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    @property
    def time_to_go(self) -> np.ndarray:
        """T - t_k for k = 0..N (last entry is exactly 0)."""
        return self.horizon - self.times


def noise_points(branching: int, dt: float) -> np.ndarray:
    """Equally weighted increments with mean zero and variance dt.

    Branching 2 gives exactly (-sqrt(dt), +sqrt(dt)); larger branchings use
    symmetric, evenly spaced points rescaled to unit variance.
    """
    if branching < 2:
        raise LatticeError(f"Branching must be at least 2, got {branching}")
    if branching == 2:
        root = math.sqrt(dt)
        return np.array([-root, root])
    s = np.linspace(-1.0, 1.0, branching)
    s = s * math.sqrt(branching / float(np.dot(s, s)))
    return s * math.sqrt(dt)


def tree_node_count(steps: int, branching: int) -> int:
    return sum(branching ** k for k in range(steps + 1))


class ScenarioTree:
    """Immutable scenario tree (or recombining lattice) over a `TimeGrid`."""

    def __init__(
        self,
        grid: TimeGrid,
        children: Sequence[np.ndarray],
        probabilities: Sequence[np.ndarray],
        increments: Sequence[np.ndarray],
        branching: int,
        seed: int = 0,
        recombining: bool = False,
    ):
        if len(children) != grid.steps or len(probabilities) != grid.steps or len(increments) != grid.steps:
            raise LatticeError("Tree arrays must cover every step of the grid")
        self.grid = grid
        self.branching = int(branching)
        self.seed = int(seed)
        self.recombining = bool(recombining)

        self._children = tuple(_frozen(np.asarray(c, dtype=np.int64)) for c in children)
        self._probs = tuple(_frozen(np.asarray(p, dtype=float)) for p in probabilities)
        self._increments = tuple(_frozen(np.asarray(d, dtype=float)) for d in increments)

        sizes = [1]
        for k, ch in enumerate(self._children):
            if ch.shape != (sizes[k], self.branching):
                raise LatticeError(f"Level {k} children have shape {ch.shape}, expected {(sizes[k], self.branching)}")
            sizes.append(int(ch.max()) + 1)
        self._sizes = tuple(sizes)
        self._offsets = tuple(int(x) for x in np.concatenate([[0], np.cumsum(sizes)]))

        self._parents: Optional[Tuple[np.ndarray, ...]] = None
        if not self.recombining:
            parents: List[np.ndarray] = [_frozen(np.zeros(0, dtype=np.int64))]
            for k, ch in enumerate(self._children):
                par = np.empty(sizes[k + 1], dtype=np.int64)
                par[ch.ravel()] = np.repeat(np.arange(sizes[k]), self.branching)
                parents.append(_frozen(par))
            self._parents = tuple(parents)

        self._node_probs: Optional[Tuple[np.ndarray, ...]] = None
        self._check_structure()

    # -- shape ---------------------------------------------------------------

    @property
    def steps(self) -> int:
        return self.grid.steps

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def num_nodes(self) -> int:
        return self._offsets[-1]

    def level_size(self, k: int) -> int:
        return self._sizes[k]

    def node_id(self, k: int, index: Union[int, np.ndarray]) -> Union[int, np.ndarray]:
        """Global node id of the `index`-th node at level k (root is 0)."""
        return self._offsets[k] + index

    def locate(self, node_id: int) -> Tuple[int, int]:
        k = int(np.searchsorted(self._offsets, node_id, side="right")) - 1
        if k < 0 or k > self.steps:
            raise LatticeError(f"Unknown node id {node_id}")
        return k, node_id - self._offsets[k]

    def children(self, k: int) -> np.ndarray:
        return self._children[k]

    def transition_probabilities(self, k: int) -> np.ndarray:
        return self._probs[k]

    def increments(self, k: int) -> np.ndarray:
        return self._increments[k]

    def parents(self, k: int) -> np.ndarray:
        """Parent index (at level k-1) of every node at level k."""
        self.require_paths("parents")
        assert self._parents is not None
        return self._parents[k]

    def require_paths(self, operation: str) -> None:
        if self.recombining:
            raise LatticeError(f"{operation} needs unique paths and is not available on a recombining lattice")

    # -- probabilities -------------------------------------------------------

    def node_probabilities(self, k: int) -> np.ndarray:
        """Unconditional probability of every node at level k."""
        if self._node_probs is None:
            levels = [np.ones(1)]
            for j in range(self.steps):
                nxt = np.zeros(self._sizes[j + 1])
                weights = levels[j][:, None] * self._probs[j]
                for col in range(self.branching):
                    np.add.at(nxt, self._children[j][:, col], weights[:, col])
                levels.append(_frozen(nxt))
            self._node_probs = tuple(levels)
        return self._node_probs[k]

    # -- expectation operators ----------------------------------------------

    def conditional_expectation(self, values_next: np.ndarray, k: int) -> np.ndarray:
        """E[values at level k+1 | level-k node], summed over children in id order."""
        if not 0 <= k < self.steps:
            raise LatticeError(f"No level {k + 1} below level {k} (steps={self.steps})")
        values_next = np.asarray(values_next, dtype=float)
        if values_next.shape != (self._sizes[k + 1],):
            raise LatticeError(
                f"Level {k + 1} needs {self._sizes[k + 1]} node values, got shape {values_next.shape}"
            )
        ch = self._children[k]
        pr = self._probs[k]
        acc = pr[:, 0] * values_next[ch[:, 0]]
        for col in range(1, self.branching):
            acc = acc + pr[:, col] * values_next[ch[:, col]]
        return acc

    def condition_down(self, values: np.ndarray, from_level: int, to_level: int) -> np.ndarray:
        """Iterated conditional expectation from `from_level` down to `to_level`."""
        out = np.asarray(values, dtype=float)
        for k in range(from_level - 1, to_level - 1, -1):
            out = self.conditional_expectation(out, k)
        return out

    def expectation(self, values: np.ndarray, k: int) -> float:
        values = np.asarray(values, dtype=float)
        if values.shape != (self._sizes[k],):
            raise LatticeError(f"Level {k} needs {self._sizes[k]} node values, got shape {values.shape}")
        return float(np.dot(self.node_probabilities(k), values))

    def child_values(self, values_next: np.ndarray, k: int) -> np.ndarray:
        """Level-(k+1) values arranged per edge, shape (n_k, branching)."""
        return np.asarray(values_next, dtype=float)[self._children[k]]

    # -- path helpers (non-recombining only) ---------------------------------

    def carry_forward(self, values: np.ndarray, k: int) -> np.ndarray:
        """Copy level-k values onto the level-(k+1) children."""
        return np.asarray(values)[self.parents(k + 1)]

    def ancestor_index(self, from_level: int, to_level: int) -> np.ndarray:
        """For every node at `from_level`, the index of its ancestor at `to_level`."""
        self.require_paths("ancestor_index")
        idx = np.arange(self._sizes[from_level])
        for k in range(from_level, to_level, -1):
            idx = self.parents(k)[idx]
        return idx

    def cumulative_noise(self, k: int) -> np.ndarray:
        """Sum of the driving increments from the root to every level-k node."""
        if self.recombining:
            ups = np.arange(k + 1)
            return (2 * ups - k) * math.sqrt(self.dt)
        total = np.zeros(1)
        for j in range(k):
            total = self.carry_forward(total, j) + self._edge_to_child(j, self._increments[j])
        return total

    def arrival_increment(self, k: int) -> np.ndarray:
        """Increment of the edge leading into every level-k node (k >= 1)."""
        self.require_paths("arrival_increment")
        if k < 1:
            raise LatticeError("The root has no arrival increment")
        return self._edge_to_child(k - 1, self._increments[k - 1])

    def move_counts(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """Numbers of up (positive) and down (negative) moves on the way to level k."""
        if self.recombining:
            ups = np.arange(k + 1)
            return ups, k - ups
        ups = np.zeros(1, dtype=np.int64)
        downs = np.zeros(1, dtype=np.int64)
        for j in range(k):
            inc = self._edge_to_child(j, self._increments[j])
            ups = self.carry_forward(ups, j) + (inc > 0)
            downs = self.carry_forward(downs, j) + (inc < 0)
        return ups, downs

    def _edge_to_child(self, k: int, edge_values: np.ndarray) -> np.ndarray:
        out = np.empty(self._sizes[k + 1], dtype=np.asarray(edge_values).dtype)
        out[self._children[k].ravel()] = np.asarray(edge_values).ravel()
        return out

    # -- debug ---------------------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready dump: nodes with id, parent, probability, increment."""
        nodes: List[Dict[str, Any]] = [
            {"id": 0, "level": 0, "parent": None, "probability": None, "increment": None}
        ]
        for k in range(self.steps):
            ch, pr, inc = self._children[k], self._probs[k], self._increments[k]
            for i in range(self._sizes[k]):
                for col in range(self.branching):
                    nodes.append(
                        {
                            "id": int(self.node_id(k + 1, ch[i, col])),
                            "level": k + 1,
                            "parent": int(self.node_id(k, i)),
                            "probability": float(pr[i, col]),
                            "increment": float(inc[i, col]),
                        }
                    )
        return {
            "horizon": self.grid.horizon,
            "steps": self.steps,
            "branching": self.branching,
            "recombining": self.recombining,
            "nodes": nodes,
        }

    def _check_structure(self) -> None:
        for k in range(self.steps):
            pr = self._probs[k]
            if np.any(pr <= 0):
                raise LatticeError(f"Level {k} has a non-positive transition probability")
            if not np.allclose(pr.sum(axis=1), 1.0, rtol=0.0, atol=1e-14):
                raise LatticeError(f"Transition probabilities at level {k} do not sum to one")

    def __repr__(self) -> str:
        kind = "recombining" if self.recombining else "tree"
        return f"ScenarioTree({kind}, steps={self.steps}, branching={self.branching}, nodes={self.num_nodes})"


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def build_binary_tree(
    grid: TimeGrid, branching: int = 2, seed: int = 0, max_nodes: int = MAX_TREE_NODES
) -> ScenarioTree:
    """Non-recombining tree with `branching` equally likely children per node.

    The seed does not change the tree itself; it is kept on the tree and
    used by randomized coefficient models built on top of it.
    """
    points = noise_points(branching, grid.dt)
    total = tree_node_count(grid.steps, branching)
    if total > max_nodes:
        raise LatticeError(
            f"Tree with steps={grid.steps}, branching={branching} needs {total} nodes "
            f"(cap {max_nodes}); use fewer steps or a recombining walk"
        )
    children, probs, incs = [], [], []
    for k in range(grid.steps):
        size = branching ** k
        children.append(np.arange(size * branching, dtype=np.int64).reshape(size, branching))
        probs.append(np.full((size, branching), 1.0 / branching))
        incs.append(np.tile(points, (size, 1)))
    _logger.debug("Built tree: steps=%s branching=%s nodes=%s", grid.steps, branching, total)
    return ScenarioTree(grid, children, probs, incs, branching=branching, seed=seed)


def build_recombining_walk(grid: TimeGrid, seed: int = 0, max_nodes: int = MAX_TREE_NODES) -> ScenarioTree:
    """Binary random walk whose level k holds the k+1 reachable positions."""
    total = (grid.steps + 1) * (grid.steps + 2) // 2
    if total > max_nodes:
        raise LatticeError(f"Recombining walk with steps={grid.steps} needs {total} nodes (cap {max_nodes})")
    points = noise_points(2, grid.dt)
    children, probs, incs = [], [], []
    for k in range(grid.steps):
        j = np.arange(k + 1, dtype=np.int64)
        children.append(np.stack([j, j + 1], axis=1))
        probs.append(np.full((k + 1, 2), 0.5))
        incs.append(np.tile(points, (k + 1, 1)))
    return ScenarioTree(grid, children, probs, incs, branching=2, seed=seed, recombining=True)


class AdaptedProcess:
    """One real value per node on levels 0..K of a tree."""

    __slots__ = ("tree", "_values", "name")

    def __init__(self, tree: ScenarioTree, values: Sequence[np.ndarray], name: str = ""):
        if not 1 <= len(values) <= tree.steps + 1:
            raise LatticeError(f"Process needs between 1 and {tree.steps + 1} levels, got {len(values)}")
        frozen = []
        for k, v in enumerate(values):
            arr = np.asarray(v, dtype=float)
            if arr.shape != (tree.level_size(k),):
                raise LatticeError(
                    f"Process {name or '?'} level {k}: expected {tree.level_size(k)} values, got shape {arr.shape}"
                )
            frozen.append(_frozen(arr))
        self.tree = tree
        self._values = tuple(frozen)
        self.name = name

    @classmethod
    def constant(cls, tree: ScenarioTree, value: float, last_level: int, name: str = "") -> "AdaptedProcess":
        return cls(tree, [np.full(tree.level_size(k), float(value)) for k in range(last_level + 1)], name)

    @classmethod
    def from_levels(
        cls, tree: ScenarioTree, fn: Callable[[int], np.ndarray], last_level: int, name: str = ""
    ) -> "AdaptedProcess":
        return cls(tree, [fn(k) for k in range(last_level + 1)], name)

    @property
    def last_level(self) -> int:
        return len(self._values) - 1

    def level(self, k: int) -> np.ndarray:
        return self._values[k]

    def levels(self) -> Tuple[np.ndarray, ...]:
        return self._values

    def map(self, fn: Callable[[np.ndarray], np.ndarray], name: str = "") -> "AdaptedProcess":
        return AdaptedProcess(self.tree, [fn(v) for v in self._values], name or self.name)

    def _combine(self, other: Union["AdaptedProcess", float], op: Callable) -> "AdaptedProcess":
        if isinstance(other, AdaptedProcess):
            if other.tree is not self.tree:
                raise LatticeError("Processes live on different trees")
            depth = min(self.last_level, other.last_level) + 1
            return AdaptedProcess(self.tree, [op(self._values[k], other._values[k]) for k in range(depth)])
        return AdaptedProcess(self.tree, [op(v, other) for v in self._values])

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, other):
        return self._combine(other, np.multiply)

    __radd__ = __add__
    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"AdaptedProcess({self.name or 'unnamed'}, levels=0..{self.last_level})"


@dataclass(frozen=True)
class DoobDecomposition:
    """Per-edge split of a process: child - parent = predictable + martingale.

    ``predictable[k]`` has one value per level-k node, ``martingale[k]`` one
    value per edge, shape (n_k, branching).
    """

    predictable: Tuple[np.ndarray, ...]
    martingale: Tuple[np.ndarray, ...]

    def max_conditional_mean(self, tree: ScenarioTree) -> float:
        worst = 0.0
        for k, mart in enumerate(self.martingale):
            mean = np.sum(tree.transition_probabilities(k) * mart, axis=1)
            worst = max(worst, float(np.max(np.abs(mean))) if mean.size else 0.0)
        return worst


ValuesLike = Union[AdaptedProcess, np.ndarray]


def _level_values(proc: ValuesLike, k: int) -> np.ndarray:
    if isinstance(proc, AdaptedProcess):
        if k > proc.last_level:
            raise LatticeError(f"Process {proc.name or '?'} has no values at level {k}")
        return proc.level(k)
    return np.asarray(proc, dtype=float)


def conditional_expectation(proc: ValuesLike, tree: ScenarioTree, level: int) -> np.ndarray:
    """E[proc_{level+1} | level-`level` node]; `proc` may be a process or raw level values."""
    return tree.conditional_expectation(_level_values(proc, level + 1), level)


def expectation(proc: ValuesLike, tree: ScenarioTree, level: int) -> float:
    return tree.expectation(_level_values(proc, level), level)


def doob_decompose(proc: AdaptedProcess) -> DoobDecomposition:
    tree = proc.tree
    predictable, martingale = [], []
    for k in range(proc.last_level):
        parent = proc.level(k)
        edge_delta = tree.child_values(proc.level(k + 1), k) - parent[:, None]
        drift = tree.conditional_expectation(proc.level(k + 1), k) - parent
        predictable.append(_frozen(drift))
        martingale.append(_frozen(edge_delta - drift[:, None]))
    return DoobDecomposition(tuple(predictable), tuple(martingale))


def covariation(a: AdaptedProcess, b: AdaptedProcess) -> AdaptedProcess:
    """Path sums of products of increments; [a, a] is the quadratic variation."""
    tree = a.tree
    tree.require_paths("covariation")
    depth = min(a.last_level, b.last_level)
    out = [np.zeros(1)]
    for k in range(depth):
        par = tree.parents(k + 1)
        da = a.level(k + 1) - a.level(k)[par]
        db = b.level(k + 1) - b.level(k)[par]
        out.append(out[k][par] + da * db)
    return AdaptedProcess(tree, out, name=f"[{a.name},{b.name}]")


def quadratic_variation(proc: AdaptedProcess) -> AdaptedProcess:
    qv = covariation(proc, proc)
    qv.name = f"[{proc.name}]"
    return qv

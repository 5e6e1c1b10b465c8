import math

import numpy as np
import pytest

from src.lqtrack.errors import LatticeError
from src.lqtrack.lattice import (
    AdaptedProcess,
    TimeGrid,
    build_binary_tree,
    build_recombining_walk,
    covariation,
    doob_decompose,
    noise_points,
    quadratic_variation,
    tree_node_count,
)


def brownian(tree):
    return AdaptedProcess.from_levels(tree, tree.cumulative_noise, tree.steps, name="W")


def test_time_grid_rejects_bad_input():
    with pytest.raises(LatticeError):
        TimeGrid(0.0, 4)
    with pytest.raises(LatticeError):
        TimeGrid(1.0, 0)
    with pytest.raises(LatticeError):
        TimeGrid(math.inf, 4)


def test_time_to_go_ends_at_zero():
    grid = TimeGrid(2.0, 8)
    assert grid.dt == 0.25
    assert grid.time_to_go[0] == 2.0
    assert grid.time_to_go[-1] == 0.0


@pytest.mark.parametrize("branching", [2, 3, 4])
def test_noise_points_have_mean_zero_variance_dt(branching):
    pts = noise_points(branching, 0.1)
    assert abs(pts.mean()) < 1e-15
    assert np.mean(pts ** 2) == pytest.approx(0.1, rel=1e-12)


def test_binary_noise_is_plus_minus_root_dt():
    assert noise_points(2, 0.25).tolist() == [-0.5, 0.5]
    with pytest.raises(LatticeError):
        noise_points(1, 0.1)


def test_binary_tree_layout():
    tree = build_binary_tree(TimeGrid(1.0, 3))
    assert [tree.level_size(k) for k in range(4)] == [1, 2, 4, 8]
    assert tree.num_nodes == tree_node_count(3, 2) == 15
    assert tree.children(1).tolist() == [[0, 1], [2, 3]]
    assert tree.parents(2).tolist() == [0, 0, 1, 1]


def test_node_cap_is_enforced():
    with pytest.raises(LatticeError):
        build_binary_tree(TimeGrid(1.0, 12), max_nodes=1000)


def test_locate_inverts_node_id():
    tree = build_binary_tree(TimeGrid(1.0, 4), branching=3)
    for k in range(tree.steps + 1):
        for i in range(tree.level_size(k)):
            assert tree.locate(int(tree.node_id(k, i))) == (k, i)
    with pytest.raises(LatticeError):
        tree.locate(tree.num_nodes)


def test_cumulative_noise_is_a_martingale():
    tree = build_binary_tree(TimeGrid(1.0, 5), branching=3)
    for k in range(tree.steps):
        ahead = tree.conditional_expectation(tree.cumulative_noise(k + 1), k)
        assert np.max(np.abs(ahead - tree.cumulative_noise(k))) < 1e-14


def test_recombining_walk_node_probabilities_are_binomial():
    walk = build_recombining_walk(TimeGrid(1.0, 3))
    assert walk.level_size(3) == 4
    assert walk.node_probabilities(3) == pytest.approx(np.array([1, 3, 3, 1]) / 8.0)
    assert walk.cumulative_noise(2) == pytest.approx(np.array([-2, 0, 2]) * math.sqrt(1 / 3))


def test_recombining_walk_refuses_path_operations():
    walk = build_recombining_walk(TimeGrid(1.0, 3))
    with pytest.raises(LatticeError):
        walk.require_paths("trajectory")
    with pytest.raises(LatticeError):
        walk.parents(1)
    with pytest.raises(LatticeError):
        quadratic_variation(brownian(walk))


def test_recombining_matches_tree_expectations():
    grid = TimeGrid(1.0, 4)
    walk, tree = build_recombining_walk(grid), build_binary_tree(grid)
    f = lambda w: np.maximum(w, 0.0) ** 2  # noqa: E731
    walk_value = walk.condition_down(f(walk.cumulative_noise(4)), 4, 0)[0]
    tree_value = tree.condition_down(f(tree.cumulative_noise(4)), 4, 0)[0]
    assert walk_value == pytest.approx(tree_value, rel=1e-14)


def test_doob_of_squared_noise_has_drift_dt():
    tree = build_binary_tree(TimeGrid(1.0, 4))
    squared = brownian(tree) * brownian(tree)
    doob = doob_decompose(squared)
    for drift in doob.predictable:
        assert drift == pytest.approx(np.full(drift.shape, tree.dt), rel=1e-12)
    assert doob.max_conditional_mean(tree) < 1e-14


def test_quadratic_variation_of_noise_is_time():
    tree = build_binary_tree(TimeGrid(1.0, 5))
    qv = quadratic_variation(brownian(tree))
    for k in range(tree.steps + 1):
        assert qv.level(k) == pytest.approx(np.full(tree.level_size(k), k * tree.dt), abs=1e-14)


def test_doob_parts_recompose_the_process():
    tree = build_binary_tree(TimeGrid(1.0, 3), branching=3)
    w = brownian(tree)
    proc = w * w * w + 0.5 * w
    doob = doob_decompose(proc)
    rebuilt = [proc.level(0)]
    for k in range(tree.steps):
        nxt = np.empty(tree.level_size(k + 1))
        nxt[tree.children(k)] = rebuilt[k][:, None] + doob.predictable[k][:, None] + doob.martingale[k]
        rebuilt.append(nxt)
    for k in range(tree.steps + 1):
        assert rebuilt[k] == pytest.approx(proc.level(k), abs=1e-12)


def test_covariation_is_bilinear():
    tree = build_binary_tree(TimeGrid(1.0, 4))
    a = brownian(tree)
    b = a * a
    c = a + 2.0 * b
    lhs = covariation(a + b, c)
    rhs = covariation(a, c) + covariation(b, c)
    scaled = covariation(3.0 * a, c)
    single = covariation(a, c)
    qv_sum = quadratic_variation(a + b)
    expanded = quadratic_variation(a) + 2.0 * covariation(a, b) + quadratic_variation(b)
    for k in range(tree.steps + 1):
        assert lhs.level(k) == pytest.approx(rhs.level(k), abs=1e-12)
        assert scaled.level(k) == pytest.approx(3.0 * single.level(k), abs=1e-12)
        assert covariation(a, b).level(k) == pytest.approx(covariation(b, a).level(k), abs=1e-15)
        assert qv_sum.level(k) == pytest.approx(expanded.level(k), abs=1e-12)


def test_expectation_shape_errors():
    tree = build_binary_tree(TimeGrid(1.0, 2))
    with pytest.raises(LatticeError):
        tree.conditional_expectation(np.zeros(3), 1)
    with pytest.raises(LatticeError):
        tree.conditional_expectation(np.zeros(2), 2)
    with pytest.raises(LatticeError):
        AdaptedProcess(tree, [np.zeros(1), np.zeros(3)])


def test_processes_on_different_trees_do_not_combine():
    grid = TimeGrid(1.0, 2)
    a = AdaptedProcess.constant(build_binary_tree(grid), 1.0, 2)
    b = AdaptedProcess.constant(build_binary_tree(grid), 1.0, 2)
    with pytest.raises(LatticeError):
        a + b


def test_to_dict_lists_every_node_once():
    tree = build_binary_tree(TimeGrid(1.0, 3))
    dump = tree.to_dict()
    assert sorted(n["id"] for n in dump["nodes"]) == list(range(tree.num_nodes))
    assert dump["nodes"][1]["parent"] == 0

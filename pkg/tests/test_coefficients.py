import math

import numpy as np
import pytest

from src.lqtrack.coefficients import (
    BranchSignSpec,
    GeometricSpec,
    NodeTableSpec,
    RandomUniformSpec,
    Slot,
    degenerate_probability,
    materialize,
    validate,
)
from src.lqtrack.data.loader import build_problem, list_catalog, parse_scenario, resolve_scenario
from src.lqtrack.errors import ConfigError, ValidationFailure
from src.lqtrack.lattice import TimeGrid, build_binary_tree, build_recombining_walk

from tests.conftest import SCENARIO_YAML, make_problem


def test_constant_problem_materializes_on_every_level():
    tree, coeffs = make_problem(3, nu=2.0, kappa=0.5, xi=0.1, XiT=1.0, eta=4.0)
    assert coeffs.nu.last_level == tree.steps - 1
    assert coeffs.kappa.level(2).tolist() == [0.5] * 4
    assert coeffs.xi_T.tolist() == [1.0] * 4
    assert coeffs.eta.tolist() == [4.0] * 4
    assert coeffs.is_deterministic()
    assert not coeffs.constrained.any()


def test_infinite_eta_marks_constrained_nodes():
    _, coeffs = make_problem(3)
    assert coeffs.constrained.all()
    assert coeffs.truncated_eta(7.0).tolist() == [7.0] * 4
    with pytest.raises(ValueError):
        coeffs.truncated_eta(math.inf)


def test_geometric_kappa_on_walk_counts_moves():
    walk = build_recombining_walk(TimeGrid(1.0, 3))
    proc = materialize(GeometricSpec(initial=2.0, up=1.5, down=0.5), walk, Slot.KAPPA)
    assert proc.level(2) == pytest.approx([2.0 * 0.25, 2.0 * 0.75, 2.0 * 2.25])


def test_branch_sign_is_revealed_at_its_level():
    tree = build_binary_tree(TimeGrid(1.0, 4))
    proc = materialize(BranchSignSpec(level=1, scale=1.0, offset=0.5), tree, Slot.XI_T)
    assert proc.level(0).tolist() == [0.5]
    assert proc.level(1).tolist() == [-0.5, 1.5]
    assert proc.level(3).tolist() == [-0.5] * 4 + [1.5] * 4


def test_branch_sign_needs_unique_paths():
    walk = build_recombining_walk(TimeGrid(1.0, 4))
    with pytest.raises(ValidationFailure) as exc:
        materialize(BranchSignSpec(level=1), walk, Slot.XI_T)
    assert exc.value.slot == "XiT"


def test_node_table_size_mismatch():
    tree = build_binary_tree(TimeGrid(1.0, 2))
    with pytest.raises(ValidationFailure):
        materialize(NodeTableSpec(values=[[1.0], [1.0, 2.0, 3.0]]), tree, Slot.NU)


def test_uniform_model_is_reproducible():
    tree = build_binary_tree(TimeGrid(1.0, 4), seed=3)
    a = materialize(RandomUniformSpec(low=0.5, high=1.5), tree, Slot.NU)
    b = materialize(RandomUniformSpec(low=0.5, high=1.5), tree, Slot.NU)
    for k in range(tree.steps):
        assert np.array_equal(a.level(k), b.level(k))
        assert np.all((a.level(k) >= 0.5) & (a.level(k) <= 1.5))


def test_negative_kappa_names_its_node():
    with pytest.raises(ValidationFailure) as exc:
        make_problem(3, kappa=-1.0)
    assert exc.value.slot == "kappa"
    assert exc.value.node_id == 0


def test_validate_passes_regular_data():
    _, coeffs = make_problem(4, eta=2.0)
    report = validate(coeffs)
    assert report.passed
    assert report.to_dict()["passed"] is True


def test_validate_flags_degenerate_terminal():
    _, coeffs = make_problem(3, nu=0.0, eta=0.0)
    report = validate(coeffs)
    assert not report.passed
    check = report.get("nondegenerate_terminal")
    assert not check.passed
    assert check.witness == 0


def test_single_constrained_leaf_keeps_only_its_ancestors_nondegenerate():
    eta = NodeTableSpec(values=[[0.0], [0.0, 0.0], [math.inf, 0.0, 0.0, 0.0]])
    tree, coeffs = make_problem(3, nu=0.0, eta=eta)
    probs = degenerate_probability(coeffs)
    assert probs[0].tolist() == [0.75]
    assert probs[1].tolist() == [0.5, 1.0]
    assert probs[2].tolist() == [0.0, 1.0, 1.0, 1.0]
    check = validate(coeffs).get("nondegenerate_terminal")
    assert not check.passed
    assert check.witness == tree.node_id(1, 1)


def test_scenario_inf_words_parse_as_floats():
    cfg = parse_scenario(SCENARIO_YAML.format(name="s", steps=3, kappa=1.0, eta="Infinity"))
    assert cfg.coefficients.eta.value == math.inf
    tree, coeffs = build_problem(cfg)
    assert tree.steps == 3
    assert coeffs.constrained.all()


def test_schema_error_points_at_field_and_line():
    text = SCENARIO_YAML.format(name="s", steps=0, kappa=1.0, eta="inf")
    with pytest.raises(ConfigError) as exc:
        parse_scenario(text)
    assert exc.value.field == "grid.steps"
    assert exc.value.line == 5


def test_union_tag_is_dropped_from_field_path():
    text = SCENARIO_YAML.format(name="s", steps=3, kappa=1.0, eta="inf").replace(
        "kappa: {kind: constant, value: 1.0}", "kappa: {kind: geometric, initial: 1.0, up: 0.0, down: 1.0}"
    )
    with pytest.raises(ConfigError) as exc:
        parse_scenario(text)
    assert exc.value.field == "coefficients.kappa.up"


def test_malformed_yaml_is_a_config_error():
    with pytest.raises(ConfigError) as exc:
        parse_scenario("name: [unclosed\n")
    assert exc.value.exit_code == 2
    with pytest.raises(ConfigError):
        parse_scenario("- just\n- a list\n")


def test_unknown_keys_are_rejected():
    text = SCENARIO_YAML.format(name="s", steps=3, kappa=1.0, eta="inf") + "colour: blue\n"
    with pytest.raises(ConfigError) as exc:
        parse_scenario(text)
    assert exc.value.field == "colour"


def test_catalog_entries_resolve():
    names = [name for name, _ in list_catalog()]
    assert "constant_liquidation" in names
    assert "mixed_eta" in names
    assert resolve_scenario("mixed_eta").name == "mixed_eta.yaml"
    with pytest.raises(ConfigError):
        resolve_scenario("no_such_scenario")

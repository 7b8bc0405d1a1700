import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyadlab.tree import (
    ConfigError,
    TreeConfig,
    build_tree,
    children_of,
    node_count,
    parent_of,
    tree_from_dict,
)


def test_n1_binary_geometric():
    t = build_tree(TreeConfig(1, 2, base=2.0))
    assert t.n_nodes == 3
    assert t.coeff.tolist() == [0.0, 2.0, 2.0]
    assert t.ghost_coeff.tolist() == [[4.0, 4.0], [4.0, 4.0]]


def test_root_only_tree():
    t = build_tree(TreeConfig(0, 2, base=2.0))
    assert t.n_nodes == 1
    assert t.coeff.tolist() == [0.0]
    assert t.ghost_coeff.tolist() == [[2.0, 2.0]]
    assert children_of(t, 0) == []


def test_generations_n2():
    t = build_tree(TreeConfig(2))
    assert t.n_nodes == 7
    assert t.generation.tolist() == [0, 1, 1, 2, 2, 2, 2]


def test_parent_of():
    t = build_tree(TreeConfig(2))
    assert parent_of(t, 0) is None
    assert parent_of(t, 1) == 0
    assert parent_of(t, 6) == 2


def test_children_of():
    assert children_of(build_tree(TreeConfig(1)), 1) == []
    t = build_tree(TreeConfig(2))
    assert children_of(t, 0) == [1, 2]
    assert children_of(t, 2) == [5, 6]


@pytest.mark.parametrize("bad", [-1, 7, 2.0])
def test_invalid_node_id(bad):
    t = build_tree(TreeConfig(2))
    with pytest.raises(IndexError):
        parent_of(t, bad)


@pytest.mark.parametrize(
    "kwargs, field",
    [
        (dict(max_generation=-1), "max_generation"),
        (dict(max_generation=2, arity=0), "arity"),
        (dict(max_generation=2, base=1.0), "base"),
        (dict(max_generation=2, sigma=0.0), "sigma"),
        (dict(max_generation=1, coefficients=(0, 1, 1)), "coefficients"),
        (dict(max_generation=1, coefficients=(0, 1, -1, 1, 1, 1, 1)), "coefficients"),
    ],
)
def test_config_errors_name_field(kwargs, field):
    with pytest.raises(ConfigError) as exc:
        TreeConfig(**kwargs)
    assert exc.value.field == field
    assert field in str(exc.value)


def test_explicit_coefficients_include_ghosts():
    c = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    t = build_tree(TreeConfig(1, coefficients=c))
    assert t.coeff.tolist() == [0.0, 1.0, 2.0]
    assert t.ghost_coeff.tolist() == [[3.0, 4.0], [5.0, 6.0]]
    assert t.ghost_sq.tolist() == [0.0, 25.0, 61.0]
    assert t.child_sq.tolist() == [5.0, 0.0, 0.0]


def test_arrays_are_read_only():
    t = build_tree(TreeConfig(2))
    with pytest.raises(ValueError):
        t.coeff[1] = 5.0


def test_json_round_trip():
    t = build_tree(TreeConfig(2, 3, sigma=0.5, base=2 ** (2 / 3)))
    back = tree_from_dict(json.loads(t.to_json()))
    np.testing.assert_array_equal(back.coeff, t.coeff)
    np.testing.assert_array_equal(back.ghost_coeff, t.ghost_coeff)
    assert back.sigma == 0.5


def test_json_round_trip_explicit():
    c = tuple(float(i) for i in range(7))
    t = build_tree(TreeConfig(1, coefficients=c))
    back = tree_from_dict(t.to_dict())
    np.testing.assert_array_equal(back.ghost_coeff, t.ghost_coeff)


@given(st.integers(0, 6), st.integers(1, 4))
def test_breadth_first_layout(N, d):
    t = build_tree(TreeConfig(N, d))
    assert t.n_nodes == node_count(N, d) == sum(d ** g for g in range(N + 1))
    for j in range(1, t.n_nodes):
        p = parent_of(t, j)
        assert j in children_of(t, p)
        assert t.generation[j] == t.generation[p] + 1
    for n in range(N + 1):
        sl = t.generation_slice(n)
        assert np.all(t.generation[sl] == n)
        assert sl.stop - sl.start == d ** n


@given(st.integers(0, 5), st.integers(1, 3), st.sampled_from([2.0, 2 ** (2 / 3), 3.0]))
def test_geometric_law(N, d, b):
    t = build_tree(TreeConfig(N, d, base=b))
    np.testing.assert_allclose(t.coeff[1:], b ** t.generation[1:].astype(float))
    np.testing.assert_allclose(t.ghost_coeff, b ** (N + 1))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dyadlab import dynamics
from dyadlab.dynamics import ModelKind
from dyadlab.tree import TreeConfig, build_tree

from conftest import unit

trees = st.builds(
    lambda N, d, b, s: build_tree(TreeConfig(N, d, sigma=s, base=b)),
    st.integers(1, 4),
    st.integers(1, 3),
    st.sampled_from([2.0, 2 ** (2 / 3)]),
    st.sampled_from([1.0, 0.5]),
)


@st.composite
def tree_and_state(draw):
    tree = draw(trees)
    x = draw(arrays(float, tree.n_nodes, elements=st.floats(-2, 2)))
    x[0] = 0.0
    return tree, x


def noise_matrices(tree):
    """B_m with apply_noise(x, e_m) = B_m @ x, built column by column."""
    n = tree.n_nodes
    out = []
    for m in range(1, n):
        e = np.zeros(n)
        e[m] = 1.0
        out.append(np.column_stack([dynamics.apply_noise(tree, np.eye(n)[i], e) for i in range(n)]))
    return out


def test_zero_is_fixed(binary2):
    z = np.zeros(7)
    for kind in ModelKind:
        assert not np.any(dynamics.drift(kind, binary2, z))
    assert not np.any(dynamics.apply_noise(binary2, z, np.ones(7)))
    assert not np.any(dynamics.apply_noise(binary2, np.ones(7), z))


def test_deterministic_drift_example(binary2):
    x = np.zeros(7)
    x[[1, 3, 4]] = 1.0
    assert dynamics.drift_deterministic(binary2, x)[1] == -8.0


def test_gen1_drift_vanishes_on_n1(binary1):
    x = np.array([0.0, 0.7, -1.3])
    assert not np.any(dynamics.drift_deterministic(binary1, x))


def test_ito_correction_example(binary1):
    x = unit(binary1)
    assert dynamics.ito_correction(binary1, x)[1] == -18.0
    assert dynamics.drift(ModelKind.ITO_LINEAR, binary1, x)[1] == -18.0


def test_noise_child_term(binary2):
    x = unit(binary2)
    dW = unit(binary2, 3)
    assert dynamics.apply_noise(binary2, x, dW)[1] == 0.0
    x[3] = 1.0
    assert dynamics.apply_noise(binary2, x, dW)[1] == -4.0


def test_energy_examples(binary1):
    assert dynamics.energy(np.zeros(3)) == 0.0
    assert dynamics.energy(unit(binary1)) == 1.0
    assert dynamics.energy(np.array([0.0, 3.0, 4.0])) == 25.0


def test_boundary_dissipation_example(binary1):
    assert dynamics.boundary_dissipation(binary1, np.zeros(3)) == 0.0
    assert dynamics.boundary_dissipation(binary1, unit(binary1)) == 32.0
    # the pinned root takes c_1^2 = 4 more
    assert dynamics.root_dissipation(binary1, unit(binary1)) == 4.0
    assert dynamics.energy_leak(binary1, unit(binary1)) == 36.0


def test_leak_rate_support():
    t = build_tree(TreeConfig(3))
    leak = dynamics.leak_rate(t)
    g = t.generation
    assert np.all((leak > 0) == ((g == 1) | (g == 3)))
    np.testing.assert_array_equal(dynamics.full_rate(t) - dynamics.inner_rate(t), leak)


def test_stratonovich_linear_drift_is_boundary_only():
    t = build_tree(TreeConfig(3))
    x = np.ones(t.n_nodes)
    x[0] = 0.0
    a = dynamics.drift(ModelKind.STRATONOVICH_LINEAR, t, x)
    g = t.generation
    assert not np.any(a[(g == 2) | (g == 0)])
    # generation 1 loses the root edge, generation N the ghost edges
    np.testing.assert_allclose(a[g == 1], -0.5 * 4.0)
    np.testing.assert_allclose(a[g == 3], -0.5 * 2 * 16.0 ** 2)


def test_model_kind_parse():
    assert ModelKind.parse("ItoLinear") is ModelKind.ITO_LINEAR
    assert ModelKind.parse("stratonovich_nonlinear") is ModelKind.STRATONOVICH_NONLINEAR
    assert ModelKind.ITO_NONLINEAR.stratonovich_twin is ModelKind.STRATONOVICH_NONLINEAR
    assert ModelKind.STRATONOVICH_LINEAR.ito_twin is ModelKind.ITO_LINEAR
    with pytest.raises(ValueError):
        ModelKind.parse("levy")


def test_shape_mismatch(binary2):
    with pytest.raises(ValueError):
        dynamics.drift_deterministic(binary2, np.zeros(6))
    with pytest.raises(ValueError):
        dynamics.apply_noise(binary2, np.zeros(7), np.zeros(3))


def test_batched_evaluation(binary2):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3, 7))
    x[..., 0] = 0
    batched = dynamics.drift(ModelKind.ITO_NONLINEAR, binary2, x)
    for idx in np.ndindex(4, 3):
        np.testing.assert_array_equal(batched[idx], dynamics.drift(ModelKind.ITO_NONLINEAR, binary2, x[idx]))


@given(tree_and_state())
def test_nonlinear_drift_telescopes(ts):
    tree, x = ts
    assert abs(x @ dynamics.drift_deterministic(tree, x)) <= 1e-9 * (1 + np.sum(x ** 2) ** 1.5) * tree.coeff.max()


@given(tree_and_state(), st.floats(-3, 3))
def test_drift_is_quadratic_and_noise_linear(ts, lam):
    tree, x = ts
    f = dynamics.drift_deterministic
    np.testing.assert_allclose(f(tree, lam * x), lam ** 2 * f(tree, x), rtol=1e-12, atol=1e-9)
    dW = np.linspace(-1, 1, tree.n_nodes)
    np.testing.assert_allclose(
        dynamics.apply_noise(tree, lam * x, dW), lam * dynamics.apply_noise(tree, x, dW), rtol=1e-12, atol=1e-12
    )


@settings(max_examples=30)
@given(tree_and_state())
def test_ito_energy_balance(ts):
    """2 x.a + sum_m |b_m|^2 = -leak for the Ito drift a and noise columns b_m."""
    tree, x = ts
    qv = 0.0
    for m in range(1, tree.n_nodes):
        e = np.zeros(tree.n_nodes)
        e[m] = 1.0
        qv += np.sum(dynamics.apply_noise(tree, x, e) ** 2)
    for kind in (ModelKind.ITO_LINEAR, ModelKind.ITO_NONLINEAR):
        gen = 2 * x @ dynamics.drift(kind, tree, x) + qv
        scale = 1 + dynamics.full_rate(tree).max() * np.sum(x * x) * 3
        assert abs(gen + dynamics.energy_leak(tree, x)) <= 1e-10 * scale


@settings(max_examples=20)
@given(tree_and_state())
def test_stratonovich_conversion_matches_noise_jacobian(ts):
    tree, x = ts
    oracle = 0.5 * sum(B @ (B @ x) for B in noise_matrices(tree))
    np.testing.assert_allclose(dynamics.stratonovich_conversion(tree, x), oracle, rtol=1e-12, atol=1e-10)


@settings(max_examples=20)
@given(tree_and_state())
def test_quadratic_variation_rate(ts):
    tree, x = ts
    s2 = tree.sigma ** 2
    direct = 0.0
    for j in range(1, tree.n_nodes):
        direct += s2 * tree.coeff[j] ** 2 * x[tree.parent[j]] ** 2
    for j in range(tree.n_nodes):
        for k in range(1, tree.n_nodes):
            if tree.parent[k] == j:
                direct += s2 * tree.coeff[k] ** 2 * x[k] ** 2
    assert dynamics.quadratic_variation_rate(tree, x) == pytest.approx(direct, rel=1e-12, abs=1e-12)

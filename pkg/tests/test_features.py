import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from zapstop.chain import GbmRatioChain, random_finite_chain, sample_path
from zapstop.features import (
    FeatureError, FeatureMap, custom_basis, finance_default_basis, policy, q_value,
    random_basis, resolve_basis, s_theta_indicator, tabular,
)

finite_floats = st.floats(-1e3, 1e3, allow_nan=False)


@pytest.fixture(scope="module")
def finance_states():
    return sample_path(GbmRatioChain(), 10**4, seed=12)


def test_q_value_basics():
    f = random_basis(6, 3, 1)
    for x in range(6):
        assert q_value(np.zeros(3), x, f) == 0.0
        for i in range(3):
            assert q_value(np.eye(3)[i], x, f) == f.matrix[x, i]


def test_tabular_q_is_theta():
    v = np.arange(5.0) - 2
    f = tabular(5)
    assert [q_value(v, x, f) for x in range(5)] == v.tolist()


@given(arrays(float, 3, elements=finite_floats), arrays(float, 3, elements=finite_floats),
       finite_floats, finite_floats, st.integers(0, 5))
@settings(max_examples=100, deadline=None)
def test_q_value_is_linear(t1, t2, a, b, x):
    f = random_basis(6, 3, 2)
    lhs = q_value(a * t1 + b * t2, x, f)
    rhs = a * q_value(t1, x, f) + b * q_value(t2, x, f)
    assert abs(lhs - rhs) <= 1e-9 * (1 + abs(a) + abs(b)) * (1 + np.abs(t1).sum() + np.abs(t2).sum())


@given(arrays(float, 3, elements=finite_floats), finite_floats, st.integers(0, 5))
@settings(max_examples=100, deadline=None)
def test_policy_and_indicator_complementary(theta, cs, x):
    f = random_basis(6, 3, 3)
    assert policy(theta, x, cs, f) + s_theta_indicator(theta, x, cs, f) == 1


def test_ties_stop():
    f = random_basis(4, 2, 0)
    theta = np.array([0.3, -0.2])
    q = q_value(theta, 2, f)
    assert policy(theta, 2, q, f) == 1
    assert s_theta_indicator(theta, 2, q, f) == 0


def test_policy_signs():
    f = tabular(3)
    z = np.zeros(3)
    assert policy(z, 1, -1.0, f) == 1
    assert policy(z, 1, 1.0, f) == 0
    assert s_theta_indicator(z, 1, 1.0, f) == 1
    assert s_theta_indicator(z, 1, -1.0, f) == 0


def test_theta_dimension_checked():
    with pytest.raises(FeatureError):
        q_value(np.zeros(4), 0, tabular(3))


def test_finance_basis_constant_and_shape(finance_states):
    f = finance_default_basis()
    Psi = f.evaluate_batch(finance_states)
    assert Psi.shape == (len(finance_states), 10)
    np.testing.assert_array_equal(Psi[:, 0], 1.0)
    np.testing.assert_array_equal(Psi[:, 1], finance_states[:, -1])


def test_finance_basis_spans_stopping_cost(finance_states):
    f = finance_default_basis()
    g = GbmRatioChain()
    Psi = f.evaluate_batch(finance_states)
    target = g.stopping_cost(finance_states) - 1.0
    theta, *_ = np.linalg.lstsq(Psi, target, rcond=None)
    assert np.max(np.abs(Psi @ theta - target)) <= 1e-10


def test_finance_gram_full_rank():
    states = sample_path(GbmRatioChain(), 10**5, seed=3)
    Psi = finance_default_basis().evaluate_batch(states)
    s = np.linalg.svd(Psi.T @ Psi / len(Psi), compute_uv=False)
    assert s[-1] > 0
    assert s[-1] / s[0] > 1e-14


def test_finance_primitives_on_known_window():
    x = np.arange(1.0, 101.0)
    psi = finance_default_basis().evaluate(x)
    assert psi[2] == 1.0 and psi[3] == 100.0
    np.testing.assert_allclose(psi[4:8], [13.0, 38.0, 63.0, 88.0])
    np.testing.assert_allclose(psi[8], np.sum((np.arange(1, 101) - 50.5) * x) / 100)
    w = 0.97 ** (100 - np.arange(1, 101)) * 0.03
    np.testing.assert_allclose(psi[9], w @ x)


def test_exact_gram_of_random_basis_full_rank():
    m = random_finite_chain(10, 0)
    f = random_basis(10, 4, 0)
    Sigma = f.matrix.T @ (m.pi[:, None] * f.matrix)
    assert np.linalg.svd(Sigma, compute_uv=False)[-1] > 1e-10


def test_custom_basis_finite_and_primitives(tmp_path):
    p = tmp_path / "b.json"
    p.write_text(json.dumps({"coefficients": [[1, 1, 1], [0, 1, 2]]}))
    f = custom_basis(p, 3)
    np.testing.assert_array_equal(f.matrix, [[1, 0], [1, 1], [1, 2]])
    with pytest.raises(FeatureError):
        custom_basis(p, 4)
    p.write_text(json.dumps({"coefficients": [[1, 0], [0, 2]], "primitives": ["one", "last"]}))
    f = custom_basis(p)
    np.testing.assert_allclose(f.evaluate(np.array([1.0, 1.5])), [1.0, 3.0])
    p.write_text(json.dumps({"coefficients": [[1]], "primitives": ["nope"]}))
    with pytest.raises(FeatureError):
        custom_basis(p)


def test_resolve_basis():
    m = random_finite_chain(5, 0)
    assert resolve_basis("tabular", m).d == 5
    assert resolve_basis("random3:7", m).d == 3
    assert resolve_basis("finance10", GbmRatioChain()).d == 10
    with pytest.raises(FeatureError):
        resolve_basis("tabular", GbmRatioChain())
    with pytest.raises(FeatureError):
        resolve_basis("bogus", m)


def test_bad_batch_shape_reported():
    f = FeatureMap(2, lambda s: np.zeros((len(s), 3)), "broken")
    with pytest.raises(FeatureError, match="expected"):
        f.evaluate_batch(np.arange(4))

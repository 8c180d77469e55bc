import numpy as np
import pytest

from qkdrates.quadrature import QuadratureRule, c_constant, gauss_radau, gauss_radau_newton


def test_monomial_exactness():
    # an m-point rule with one pinned node integrates degree <= 2m-2 exactly
    for m in range(1, 21):
        rule = gauss_radau(m)
        for j in range(2 * m - 1):
            got = np.sum(rule.w * rule.t**j)
            assert abs(got - 1.0 / (j + 1)) < 1e-10, (m, j)


def test_endpoint_node_and_weight():
    for m in range(1, 21):
        rule = gauss_radau(m)
        assert rule.t[-1] == 1.0
        assert abs(rule.w[-1] - 1.0 / m**2) < 1e-10


def test_m2_rule_values():
    rule = gauss_radau(2)
    assert np.allclose(rule.t, [1.0 / 3.0, 1.0])
    assert np.allclose(rule.w, [0.75, 0.25])


def test_m1_rule_is_endpoint_only():
    rule = gauss_radau(1)
    assert np.allclose(rule.t, [1.0])
    assert np.allclose(rule.w, [1.0])


def test_nodes_inside_unit_interval():
    for m in (1, 2, 5, 16, 64):
        rule = gauss_radau(m)
        assert rule.t[0] > 0.0
        assert np.all(np.diff(rule.t) > 0.0)
        assert np.isclose(rule.w.sum(), 1.0)
        assert np.all(rule.w > 0.0)


def test_out_of_range_orders():
    for m in (0, -1, 65, 1000):
        with pytest.raises(ValueError):
            gauss_radau(m)


def test_independent_construction_agrees():
    # eigenvalue-based and root-finding constructions must coincide
    for m in (1, 2, 3, 8, 21, 40, 64):
        a = gauss_radau(m)
        b = gauss_radau_newton(m)
        assert np.abs(a.t - b.t).max() < 1e-12
        assert np.abs(a.w - b.w).max() < 1e-12


def test_entropy_constant_values():
    assert np.isclose(c_constant(gauss_radau(1)), 1.442695040888963407, atol=1e-14)
    assert np.isclose(c_constant(gauss_radau(2)), 3.606737602222408518, atol=1e-14)


def test_entropy_constant_grows_with_m():
    values = [c_constant(gauss_radau(m)) for m in range(1, 12)]
    assert np.all(np.diff(values) > 0.0)


def test_rule_validation():
    with pytest.raises(ValueError):
        QuadratureRule(m=2, t=[0.5, 0.9], w=[0.75, 0.25])  # last node not 1
    with pytest.raises(ValueError):
        QuadratureRule(m=2, t=[1.0 / 3.0, 1.0], w=[0.5, 0.5])  # wrong endpoint weight
    with pytest.raises(ValueError):
        QuadratureRule(m=2, t=[0.9, 1.0], w=[0.85, 0.25])  # weights do not sum to 1

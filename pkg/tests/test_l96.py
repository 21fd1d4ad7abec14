import numpy as np
import pytest
import scipy.linalg

from unstable_lab.errors import ConfigurationError, InvalidDimensionError
from unstable_lab.l96 import (ModelConfig, PropagatorSequence, generate_propagators, integrate,
                              l96_jacobian, l96_rhs, rk4_state_step, tangent_resolvent_step)


def rhs_loop(x, F):
    n = len(x)
    return np.array([-x[(m - 2) % n] * x[(m - 1) % n] + x[(m - 1) % n] * x[(m + 1) % n]
                     - x[m] + F for m in range(n)])


def fd_jacobian(x, F=8.0):
    n = len(x)
    J = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1e-6 * (1 + abs(x[j]))
        J[:, j] = (l96_rhs(x + e, F) - l96_rhs(x - e, F)) / (2 * e[j])
    return J


def test_rhs_fixed_point_and_origin():
    assert np.array_equal(l96_rhs(8.0 * np.ones(10), 8.0), np.zeros(10))
    assert np.array_equal(l96_rhs(np.zeros(10), 8.0), 8.0 * np.ones(10))


def test_rhs_matches_index_loop(rng):
    x = rng.normal(0, 3, 10)
    np.testing.assert_allclose(l96_rhs(x, 8.0), rhs_loop(x, 8.0), rtol=1e-14, atol=1e-13)


def test_dimension_errors():
    with pytest.raises(InvalidDimensionError):
        l96_rhs(np.zeros(3), 8.0)
    with pytest.raises(InvalidDimensionError):
        l96_jacobian(np.zeros(3))
    with pytest.raises(InvalidDimensionError):
        ModelConfig(n=3)


def test_jacobian_at_origin_and_uniform_state():
    np.testing.assert_array_equal(l96_jacobian(np.zeros(10)), -np.eye(10))
    J = l96_jacobian(2.5 * np.ones(10))
    np.testing.assert_allclose(J.sum(axis=1), -np.ones(10), atol=1e-14)


def test_jacobian_matches_finite_differences(rng):
    x = rng.normal(0, 3, 10)
    J = fd_jacobian(x)
    np.testing.assert_allclose(l96_jacobian(x), J, rtol=1e-6, atol=1e-6)


def test_jacobian_on_attractor_points(l96_props):
    for x in l96_props.states[::20][:100]:
        assert np.abs(l96_jacobian(x) - fd_jacobian(x)).max() <= 1e-5


def test_rk4_fixed_point():
    x = 8.0 * np.ones(10)
    np.testing.assert_array_equal(rk4_state_step(x, 0.01, 8.0), x)


def test_rk4_scalar_reduction():
    # equal components: the quadratic terms cancel and y' = -y + F
    h, F = 0.01, 8.0
    y = rk4_state_step(np.zeros(10), h, F)
    exact = F * (1 - np.exp(-h))
    np.testing.assert_allclose(y, exact, rtol=0, atol=1e-11)


def test_rk4_local_error_order(rng):
    x = 8.0 * np.ones(10) + rng.normal(0, 1, 10)
    defects = []
    for h in (0.02, 0.01):
        one = rk4_state_step(x, h, 8.0)
        two = rk4_state_step(rk4_state_step(x, h / 2, 8.0), h / 2, 8.0)
        defects.append(np.linalg.norm(one - two))
    assert 24 < defects[0] / defects[1] < 40


def test_resolvent_at_fixed_point_is_rk4_polynomial():
    # constant Jacobian: each substep multiplies by the degree-4 Taylor polynomial of exp(hJ)
    x = 8.0 * np.ones(10)
    x1, M = tangent_resolvent_step(x, 0.1, 0.01, 8.0)
    np.testing.assert_array_equal(x1, x)
    A = 0.01 * l96_jacobian(x)
    step = np.eye(10) + A + A @ A / 2 + A @ A @ A / 6 + A @ A @ A @ A / 24
    np.testing.assert_allclose(M, np.linalg.matrix_power(step, 10), rtol=0, atol=1e-12)


def test_resolvent_at_fixed_point_is_matrix_exponential():
    x = 8.0 * np.ones(10)
    _, M = tangent_resolvent_step(x, 0.1, 0.001, 8.0)
    np.testing.assert_allclose(M, scipy.linalg.expm(0.1 * l96_jacobian(x)), rtol=0, atol=1e-8)


def test_resolvent_single_substep_first_order(rng):
    x = rng.normal(0, 3, 10)
    h = 1e-4
    _, M = tangent_resolvent_step(x, h, h, 8.0)
    assert np.abs(M - (np.eye(10) + h * l96_jacobian(x))).max() < 50 * h * h


def test_resolvent_requires_integer_substeps():
    with pytest.raises(ConfigurationError):
        tangent_resolvent_step(np.zeros(10), 0.105, 0.01, 8.0)
    with pytest.raises(ConfigurationError):
        ModelConfig(h=0.0)


def test_liouville_determinant(l96_props):
    dets = np.linalg.det(l96_props.mats)
    np.testing.assert_allclose(dets, np.exp(-10 * 0.1), rtol=1e-4)


def test_zero_length_sequence():
    props = generate_propagators(ModelConfig(K=0, spinup_steps=10))
    assert len(props) == 0
    assert props.states.shape == (1, 10)


def test_product_telescopes_to_joined_resolvent(l96_props):
    l, k = 5, 9
    _, M = tangent_resolvent_step(l96_props.states[l], (k - l) * 0.1, 0.01, 8.0)
    np.testing.assert_allclose(l96_props.product(k, l), M, rtol=1e-10, atol=1e-10)


def test_states_follow_the_flow(l96_props):
    np.testing.assert_allclose(integrate(l96_props.states[7], 0.1, 0.01, 8.0),
                               l96_props.states[8], atol=1e-12)


def test_generation_is_deterministic():
    a = generate_propagators(ModelConfig(K=20, spinup_steps=50, seed=11))
    b = generate_propagators(ModelConfig(K=20, spinup_steps=50, seed=11))
    c = generate_propagators(ModelConfig(K=20, spinup_steps=50, seed=12))
    assert a.mats.tobytes() == b.mats.tobytes()
    assert not np.array_equal(a.mats, c.mats)


def test_sequence_validation():
    with pytest.raises(ConfigurationError):
        PropagatorSequence(np.zeros((2, 4, 4)), np.zeros((2, 4)))
    with pytest.raises(ConfigurationError):
        PropagatorSequence(np.full((1, 4, 4), np.nan), np.zeros((2, 4)))


def test_propagators_invertible(l96_props):
    assert l96_props.min_singular_values().min() > 0

"""Коэффициенты Ландау и реестр h"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from particles.exceptions import ConfigError, UnsupportedDimensionError
from particles.kernels import (
    check_divergence_identity,
    check_h_bounds,
    default_h_family,
    eval_a,
    eval_b,
    eval_sigma,
    h_from_dict,
    identity_battery,
    make_h,
    sigma_lipschitz_constant,
    sigma_times,
)

coordinates = st.floats(min_value=-5.0, max_value=5.0, allow_nan=False, allow_infinity=False)


def test_a_of_unit_vector(unit_h):
    assert np.array_equal(eval_a(np.array([1.0, 0.0]), unit_h), np.array([[0.0, 0.0], [0.0, 1.0]]))


def test_b_points_against_displacement(unit_h):
    assert np.allclose(eval_b(np.array([1.0, 2.0, 0.0]), unit_h), [-2.0, -4.0, 0.0])


def test_a_in_higher_dimension_but_no_sigma(unit_h):
    z = np.ones(4)
    assert eval_a(z, unit_h).shape == (4, 4)
    with pytest.raises(UnsupportedDimensionError):
        eval_sigma(z, unit_h)


def test_batched_shapes(floor_h, rng):
    z = rng.standard_normal((5, 7, 3))
    assert eval_a(z, floor_h).shape == (5, 7, 3, 3)
    assert eval_b(z, floor_h).shape == (5, 7, 3)
    assert eval_sigma(z, floor_h).shape == (5, 7, 3, 3)


@given(arrays(np.float64, 2, elements=coordinates), st.sampled_from(default_h_family()))
def test_sigma_factorizes_a_in_2d(z, h):
    s = eval_sigma(z, h)
    assert np.allclose(s @ s.T, eval_a(z, h), atol=1e-12 * (1 + z @ z) ** 2)


@given(arrays(np.float64, 3, elements=coordinates), st.sampled_from(default_h_family()))
def test_sigma_factorizes_a_in_3d(z, h):
    s = eval_sigma(z, h)
    assert np.allclose(s @ s.T, eval_a(z, h), atol=1e-12 * (1 + z @ z) ** 2)


@given(arrays(np.float64, 3, elements=coordinates))
def test_z_is_in_kernel_of_a(z):
    h = make_h('rational-floor', m=0.5, M=2.0)
    assert np.linalg.norm(eval_a(z, h) @ z) <= 1e-12 * max(1.0, z @ z) ** 1.5


@given(arrays(np.float64, 2, elements=coordinates))
def test_parity_is_exact(z):
    h = make_h('exponential-floor', m=0.5, M=2.0)
    assert np.array_equal(eval_a(-z, h), eval_a(z, h))
    assert np.array_equal(eval_b(-z, h), -eval_b(z, h))
    assert np.array_equal(eval_sigma(-z, h), -eval_sigma(z, h))


@settings(max_examples=50)
@given(arrays(np.float64, 3, elements=coordinates))
def test_divergence_identity_for_constant_h(z):
    h = make_h('constant', value=1.0)
    assert check_divergence_identity(z, h) <= 1e-6 * (1 + np.linalg.norm(z))


def test_divergence_identity_rejects_bad_step(unit_h):
    with pytest.raises(ConfigError):
        check_divergence_identity(np.array([1.0, 0.0]), unit_h, fd_step=0.0)


def test_h_registry_validation():
    with pytest.raises(ConfigError):
        make_h('exponential-floor', m=2.0, M=1.0)
    with pytest.raises(ConfigError):
        make_h('exponential-floor', m=1.0)
    with pytest.raises(ConfigError):
        make_h('cubic', m=1.0, M=2.0)
    with pytest.raises(ConfigError):
        make_h('rational-floor', m=0.0, M=1.0)


def test_h_from_dict_accepts_m_for_constant():
    h = h_from_dict({'kind': 'constant', 'm': 3.0})
    assert h.m == h.M == 3.0


def test_default_family_respects_bounds():
    assert all(check_h_bounds(h) for h in default_h_family())


def test_floor_h_limits(floor_h):
    assert floor_h(0.0) == pytest.approx(2.0)
    assert floor_h(np.inf) == pytest.approx(0.5)


def test_sigma_lipschitz_constant():
    assert sigma_lipschitz_constant(make_h('constant', value=4.0)) == pytest.approx(2.0)
    floor = make_h('exponential-floor', m=0.5, M=2.0)
    assert sigma_lipschitz_constant(floor) >= np.sqrt(2.0)


def test_identity_battery_passes():
    battery = identity_battery(n=300, seed=5)
    assert battery['passed']
    assert len(battery['cases']) == 6
    assert all(case['symmetries_exact'] for case in battery['cases'].values())


@pytest.mark.parametrize('d', [2, 3])
@settings(max_examples=50, deadline=None)
@given(data=st.data())
def test_sigma_times_matches_explicit_matrix(d, data):
    z = data.draw(arrays(np.float64, (7, d), elements=coordinates))
    w = data.draw(arrays(np.float64, (7, d), elements=coordinates))
    for h in default_h_family():
        r = np.einsum('ni,ni->n', z, z)
        expected = np.einsum('nij,nj->ni', eval_sigma(z, h), w)
        assert np.allclose(sigma_times(z, w, h(r)), expected, atol=1e-12)

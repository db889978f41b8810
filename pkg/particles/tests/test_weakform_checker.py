"""Слабая форма и баланс моментов"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from particles.exceptions import AnalysisError, ConfigError
from particles.kernels import default_h_family, make_h
from particles.models import RecordingPlan
from particles.simulator import run_replicas
from particles.weakform_checker import (
    TestFunction,
    balance_summary,
    kurtosis_series,
    moment_balance_check,
    weakform_rhs,
    weakform_terms,
)

velocities = arrays(np.float64, (6, 2), elements=st.floats(-3.0, 3.0, allow_nan=False))


def test_energy_derivatives(rng):
    X = rng.standard_normal((4, 3))
    phi = TestFunction.energy(3)
    assert np.allclose(phi.value(X), (X ** 2).sum(axis=1))
    assert np.allclose(phi.gradient(X), 2 * X)
    assert np.allclose(phi.hessian(X), np.broadcast_to(2 * np.eye(3), (4, 3, 3)))


def test_mixed_monomial_derivatives():
    phi = TestFunction.quadratic(0, 1, 2)
    X = np.array([[2.0, 3.0]])
    assert phi.name == 'v1v2'
    assert np.allclose(phi.gradient(X), [[3.0, 2.0]])
    assert np.allclose(phi.hessian(X), [[[0.0, 1.0], [1.0, 0.0]]])


def test_quadratic_form_matches_polynomial(rng):
    S = np.array([[2.0, 0.5], [0.5, 1.0]])
    phi = TestFunction.quadratic_form(S)
    X = rng.standard_normal((5, 2))
    assert np.allclose(phi.value(X), np.einsum('pi,ij,pj->p', X, S, X))
    assert np.allclose(phi.hessian(X), np.broadcast_to(2 * S, (5, 2, 2)))


def test_names():
    assert TestFunction.from_name('v2^2', 2).terms == {(0, 2): 1.0}
    assert TestFunction.from_name('v1v2', 3).terms == {(1, 1, 0): 1.0}
    assert TestFunction.from_name('v3', 3).degree == 1
    with pytest.raises(ConfigError):
        TestFunction.from_name('v3', 2)
    with pytest.raises(ConfigError):
        TestFunction.from_name('cubic', 2)


def test_degree_limit():
    with pytest.raises(ConfigError):
        TestFunction.polynomial({(3, 2): 1.0}, 2)
    assert TestFunction.polynomial({(2, 2): 1.0}, 2).degree == 4


def test_weak_form_by_hand(unit_h):
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    phi = TestFunction.quadratic(0, 0, 2)
    assert np.allclose(weakform_terms(X, phi, unit_h), [-0.5, 0.5])
    assert weakform_rhs(X, phi, unit_h) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=40)
@given(velocities, st.sampled_from(default_h_family()))
def test_energy_and_momentum_are_collision_invariants(X, h):
    scale = h.M * 2 * (1 + (X ** 2).sum(axis=1).mean()) ** 2
    assert abs(weakform_rhs(X, TestFunction.energy(2), h)) <= 1e-12 * scale
    for i in range(2):
        assert abs(weakform_rhs(X, TestFunction.coordinate(i, 2), h)) <= 1e-12 * scale


def test_dimension_mismatch(unit_h):
    with pytest.raises(ConfigError):
        weakform_rhs(np.zeros((3, 2)), TestFunction.energy(3), unit_h)
    with pytest.raises(ConfigError):
        weakform_rhs(np.zeros((1, 2)), TestFunction.energy(2), unit_h)


def test_partner_subsampling_is_seeded(rng):
    h = make_h('constant', value=1.0)
    X = rng.standard_normal((4100, 2))
    phi = TestFunction.quadratic(0, 0, 2)
    first = weakform_rhs(X, phi, h, seed=1)
    assert np.isfinite(first)
    assert first == weakform_rhs(X, phi, h, seed=1)


def _trajectories(spec, replicas=3):
    return run_replicas(spec, RecordingPlan(every=1, tagged_path=False), replicas)


def test_momentum_balance(small_spec):
    frame = moment_balance_check(_trajectories(small_spec), TestFunction.coordinate(0, 2), small_spec.h,
                                 window=(0.0, 0.2))
    assert list(frame.columns) == ['t', 'moment', 'lhs_derivative', 'rhs', 'residual', 'se']
    assert len(frame) == 3
    assert balance_summary(frame)['passed']
    assert frame['residual'].abs().max() < 1e-10


def test_energy_balance_residual_is_finite(small_spec):
    frame = moment_balance_check(_trajectories(small_spec), TestFunction.energy(2), small_spec.h,
                                 window=(0.0, 0.2))
    summary = balance_summary(frame)
    assert set(summary) == {'max_abs_residual', 'max_se', 'passed'}
    assert np.all(np.isfinite(frame['se']))


def test_balance_needs_five_times(small_spec):
    with pytest.raises(AnalysisError):
        moment_balance_check(_trajectories(small_spec), TestFunction.energy(2), small_spec.h, window=(0.0, 0.1))
    with pytest.raises(AnalysisError):
        moment_balance_check([], TestFunction.energy(2), small_spec.h)


def test_balance_needs_common_time_grid(small_spec):
    a = _trajectories(small_spec, 1)[0]
    b = run_replicas(small_spec.replace(delta=0.025), RecordingPlan(every=1, tagged_path=False), 1)[0]
    with pytest.raises(AnalysisError):
        moment_balance_check([a, b], TestFunction.energy(2), small_spec.h, window=(0.0, 0.2))


def test_kurtosis_series(small_spec):
    frame = kurtosis_series(_trajectories(small_spec, 1)[0])
    assert list(frame.columns) == ['t', 'kurtosis_1', 'kurtosis_2']
    assert len(frame) == small_spec.n_steps + 1


@settings(max_examples=25)
@given(velocities, st.floats(0.0, 2 * np.pi))
def test_rotation_equivariance(X, angle):
    h = make_h('exponential-floor', m=0.5, M=2.0)
    Q = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    S = np.array([[1.0, 0.3], [0.3, -0.5]])
    rotated = weakform_rhs(X @ Q.T, TestFunction.quadratic_form(S), h)
    pulled_back = weakform_rhs(X, TestFunction.quadratic_form(Q.T @ S @ Q), h)
    scale = h.M * 2 * (1 + (X ** 2).sum(axis=1).mean()) ** 2
    assert abs(rotated - pulled_back) <= 1e-12 * scale


def test_energy_balance_residual_is_within_standard_errors(small_spec):
    spec = small_spec.replace(P=30, delta=0.01, T=0.1)
    frame = moment_balance_check(_trajectories(spec, replicas=40), TestFunction.energy(2), spec.h,
                                 window=(0.0, 0.1))
    assert len(frame) == 9
    assert np.all(frame['se'] > 0)
    ratio = frame['residual'].abs() / frame['se']
    assert ratio.max() <= 5.0
    assert (ratio <= 3.0).mean() >= 0.75

"""Разложение шага, спектр Sigma(J_k) и масштабирование приращений"""

import numpy as np
import pytest

from particles.exceptions import AnalysisError
from particles.models import ModelSpec, Population, RecordingPlan
from particles.scheme_analysis import (
    decompose_step,
    increment_scaling,
    lambda1_proxy,
    sigma_jk,
    spectrum_bounds_check,
    spectrum_frame,
)
from particles.simulator import init_population, run


def test_sigma_jk_by_hand(unit_h):
    pop = Population(t=0.0, X=[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    sigma = sigma_jk(pop, 0, 1.0, unit_h)
    assert np.allclose(sigma, [[1 / 3, 1 / 3], [1 / 3, 5 / 3]])
    assert np.linalg.eigvalsh(sigma)[0] == pytest.approx(1 - np.sqrt(5) / 3)


def test_two_point_spectrum_is_tight(unit_h):
    pop = Population(t=0.0, X=[[1.0, 0.0], [-1.0, 0.0]])
    sigma = sigma_jk(pop, 0, 1.0, unit_h)
    assert np.linalg.eigvalsh(sigma)[0] == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(sigma, [[0.0, 0.0], [0.0, 2.0]])


def test_sigma_jk_two_particles(unit_h):
    pop = Population(t=0.0, X=[[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(sigma_jk(pop, 1, 1.0, unit_h), 0.5 * np.ones((2, 2)))


@pytest.mark.parametrize('scheme', ['pairwise-shared-noise', 'meanfield-gaussian'])
def test_decomposition_adds_up(unit_h, scheme):
    spec = ModelSpec(d=2, h=unit_h, P=5, delta=0.02, T=0.02, scheme=scheme, seed=4)
    pop = init_population(spec)
    dec = decompose_step(pop, spec, inner_steps=10)
    assert np.allclose(dec.J + dec.Gamma, dec.increment)
    assert np.allclose(dec.SigmaJk, sigma_jk(pop, pop.tagged, spec.delta, unit_h))
    assert dec.k == 1


def test_noiseless_decomposition_has_no_gaussian_part(small_spec):
    pop = init_population(small_spec)
    dec = decompose_step(pop, small_spec, inner_steps=10, suppress_noise=True)
    assert np.array_equal(dec.J, np.zeros(2))
    assert np.allclose(dec.Gamma, dec.increment)
    # снос за один шаг близок к замороженному сносу
    assert np.linalg.norm(dec.gamma_fluctuation) < np.linalg.norm(dec.frozen_drift)


def test_inner_mesh_must_be_fine(small_spec):
    with pytest.raises(AnalysisError):
        decompose_step(init_population(small_spec), small_spec, inner_steps=5)


def test_spectrum_bounds_hold_for_constant_h(small_spec):
    trajectory = run(small_spec, RecordingPlan(every=1))
    reports = spectrum_bounds_check(trajectory, small_spec)
    assert len(reports) == small_spec.n_steps
    assert all(not r.flagged for r in reports)
    assert all(r.lambda_min_over_delta >= r.bound_lower - 1e-10 for r in reports)
    frame = spectrum_frame(reports)
    assert list(frame['k']) == list(range(small_spec.n_steps))
    assert lambda1_proxy(reports) == pytest.approx(min(frame['m_lambda_min_mhat']))


def test_lambda1_proxy_needs_reports():
    with pytest.raises(AnalysisError):
        lambda1_proxy([])


def test_noiseless_increment_scales_linearly(small_spec):
    spec = small_spec.replace(P=4)
    report = increment_scaling(spec, [0.1, 0.01, 0.001], replicas=5, bootstrap=20, suppress_noise=True)
    assert report.slope == pytest.approx(1.0, abs=1e-9)
    assert report.deltas == [0.1, 0.01, 0.001]


def test_increment_scales_like_square_root(small_spec):
    spec = small_spec.replace(P=4)
    report = increment_scaling(spec, [0.1, 0.01, 0.001], replicas=300, bootstrap=100)
    assert abs(report.slope - 0.5) < 0.1
    assert report.ci_low < report.ci_high


def test_scaling_needs_three_deltas(small_spec):
    with pytest.raises(AnalysisError):
        increment_scaling(small_spec, [0.1, 0.01], replicas=2)
    with pytest.raises(AnalysisError):
        increment_scaling(small_spec, [0.1, 0.01, 0.001], replicas=2, order=3)


def test_gamma_scales_linearly(small_spec):
    spec = small_spec.replace(P=4)
    report = increment_scaling(spec, [0.1, 0.03, 0.01, 0.003], replicas=100, quantity='gamma', inner_steps=10,
                               bootstrap=50)
    assert abs(report.slope - 1.0) <= 0.15


def test_gamma_beyond_frozen_drift_vanishes_with_the_step(unit_h):
    ratios = []
    for delta in (0.1, 0.01):
        spec = ModelSpec(d=2, h=unit_h, P=5, delta=delta, T=delta, seed=6)
        dec = decompose_step(init_population(spec), spec, inner_steps=20, suppress_noise=True)
        ratios.append(np.linalg.norm(dec.gamma_fluctuation) / np.linalg.norm(dec.frozen_drift))
    assert ratios[1] < 0.2 * ratios[0]


def test_pairwise_gaussian_part_tracks_the_shared_noise(unit_h):
    spec = ModelSpec(d=3, h=unit_h, P=6, delta=0.01, T=0.01, seed=9)
    pop = init_population(spec)
    dec = decompose_step(pop, spec, particle=3, inner_steps=10)
    assert np.allclose(dec.J + dec.Gamma, dec.increment)
    assert np.linalg.norm(dec.gamma_fluctuation) < np.linalg.norm(dec.J)

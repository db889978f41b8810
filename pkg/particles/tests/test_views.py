"""Конвейеры экспериментов, манифест и командная строка"""

import json

import pytest
from click.testing import CliRunner

from landau_lab.cli import cli
from particles import views
from particles.exceptions import AnalysisError, ConfigError
from particles.forms import config_from_dict
from particles.urls import resolve_experiment, urlpatterns
from particles.models import EXPERIMENTS


def _run(config_data, tmp_path, experiment, **changes):
    data = {**config_data, 'experiment': experiment, 'output_dir': str(tmp_path / experiment), **changes}
    config = config_from_dict(data)
    return config, views.run_experiment(config)


def _checks(manifest):
    return {c['name']: c for c in manifest.checks}


def test_every_experiment_is_routed():
    assert {pattern.name for pattern in urlpatterns} == set(EXPERIMENTS)
    assert resolve_experiment('simulate') is views.simulate
    assert resolve_experiment('full-suite') is views.full_suite
    with pytest.raises(ConfigError):
        resolve_experiment('teleport')


def test_simulate(config_data, tmp_path):
    config, manifest = _run(config_data, tmp_path, 'simulate')
    checks = _checks(manifest)
    assert checks['momentum_conservation']['status'] == 'pass'
    assert 'energy_in_expectation[simulate]' in checks
    assert manifest.errors == []
    root = tmp_path / 'simulate'
    for name in ('config.json', 'manifest.json', 'simulate/moments.csv', 'simulate/tagged_path.csv',
                 'simulate/trajectory.json'):
        assert (root / name).is_file()
    written = json.loads((root / 'manifest.json').read_text(encoding='utf-8'))
    assert written['config_hash'] == config.content_hash()
    assert 'simulate/moments.csv' in written['artifacts']
    assert any(a.startswith('simulate/snapshots/') for a in written['artifacts'])


def test_results_do_not_depend_on_workers(config_data, tmp_path):
    _run(config_data, tmp_path / 'one', 'simulate', workers=1)
    _run(config_data, tmp_path / 'two', 'simulate', workers=2)
    for name in ('simulate/moments.csv', 'simulate/tagged_path.csv', 'config.json'):
        one = (tmp_path / 'one' / 'simulate' / name).read_bytes()
        two = (tmp_path / 'two' / 'simulate' / name).read_bytes()
        assert one == two


def test_meanfield_skips_pathwise_momentum(config_data, tmp_path):
    data = {**config_data, 'model': {**config_data['model'], 'scheme': 'meanfield-gaussian'}}
    _, manifest = _run(data, tmp_path, 'simulate')
    assert _checks(manifest)['momentum_conservation']['status'] == 'skipped'


def test_check_kernels(config_data, tmp_path):
    _, manifest = _run(config_data, tmp_path, 'check-kernels')
    assert _checks(manifest)['kernel_identities']['status'] == 'pass'
    assert (tmp_path / 'check-kernels' / 'kernels' / 'identities.json').is_file()


def test_check_moments(config_data, tmp_path):
    _, manifest = _run(config_data, tmp_path, 'check-moments')
    checks = _checks(manifest)
    assert checks['weakform_energy_identity']['status'] == 'pass'
    assert checks['weakform_momentum_identity']['status'] == 'pass'
    assert checks['moment_balance[v1]']['status'] == 'pass'
    assert 'moment_balance[energy]' in checks
    assert (tmp_path / 'check-moments' / 'moments' / 'kurtosis.csv').is_file()


def test_estimate_density(config_data, tmp_path):
    _, manifest = _run(config_data, tmp_path, 'estimate-density')
    checks = _checks(manifest)
    assert checks['density_nonnegative']['status'] == 'pass'
    assert checks['density_mass']['details']['masses']
    root = tmp_path / 'estimate-density' / 'density'
    meta = json.loads((root / 't_0.05.json').read_text(encoding='utf-8'))
    assert meta['eta'] == 0.3
    assert (root / 't_0.1.csv').is_file()


def test_analyze_scheme(config_data, tmp_path):
    _, manifest = _run(config_data, tmp_path, 'analyze-scheme')
    checks = _checks(manifest)
    assert checks['spectrum_lower_bound']['status'] == 'pass'
    assert checks['spectrum_upper_bound']['status'] == 'pass'
    assert {'increment_scaling', 'gamma_scaling'} <= set(checks)
    scaling = json.loads((tmp_path / 'analyze-scheme' / 'scheme' / 'scaling.json').read_text(encoding='utf-8'))
    assert set(scaling) == {'increment', 'gamma'}


def test_verify_bounds(config_data, tmp_path):
    _, manifest = _run(config_data, tmp_path, 'verify-bounds')
    checks = _checks(manifest)
    assert manifest.errors == []
    assert {'sandwich_gaussian_oracle', 'density_sandwich', 'tail_bound', 'logmartingale_qv'} <= set(checks)
    # грубая сетка: слишком мало значимых точек для вывода
    assert checks['density_sandwich']['status'] == 'inconclusive'


def test_full_suite_keeps_going_after_a_stage_error(config_data, tmp_path, monkeypatch):
    def broken(ctx):
        raise AnalysisError('stage broke')

    monkeypatch.setattr(views, 'SUITE_STAGES', (('broken', broken), ('check-kernels', views.check_kernels)))
    config, manifest = _run(config_data, tmp_path, 'full-suite')
    assert manifest.errors[0]['message'] == 'stage broke'
    assert 'kernel_identities' in _checks(manifest)
    assert manifest.exit_status(strict=False) == 2


def test_strict_mode_turns_failures_into_exit_code(config_data, tmp_path):
    _, manifest = _run(config_data, tmp_path, 'check-kernels')
    manifest.add_check('forced', False)
    assert manifest.exit_status(strict=False) == 0
    assert manifest.exit_status(strict=True) == 1


def test_render_plots(config_data, tmp_path):
    _run(config_data, tmp_path, 'simulate')
    written = views.render_plots(tmp_path / 'simulate')
    assert 'plots/moments.html' in written
    assert (tmp_path / 'simulate' / 'plots.json').is_file()
    manifest = json.loads((tmp_path / 'simulate' / 'manifest.json').read_text(encoding='utf-8'))
    assert {'plots/moments.html', 'plots.json'} <= set(manifest['artifacts'])
    assert 'simulate/moments.csv' in manifest['artifacts']


def test_render_plots_needs_a_finished_run(tmp_path):
    with pytest.raises(AnalysisError):
        views.render_plots(tmp_path)


def test_cli_runs_experiment(config_file, tmp_path):
    out = tmp_path / 'cli-run'
    result = CliRunner().invoke(cli, ['check-kernels', '--config', str(config_file), '--out', str(out), '--seed', '3'])
    assert result.exit_code == 0, result.output
    assert 'kernel_identities' in result.output
    manifest = json.loads((out / 'manifest.json').read_text(encoding='utf-8'))
    assert manifest['seed'] == 3


def test_cli_rejects_bad_config(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text('{"model": {"d": 2}}', encoding='utf-8')
    result = CliRunner().invoke(cli, ['simulate', '--config', str(path), '--out', str(tmp_path / 'x')])
    assert result.exit_code == 2
    assert 'model.h' in result.output


def test_cli_plot(config_data, tmp_path):
    _run(config_data, tmp_path, 'simulate')
    result = CliRunner().invoke(cli, ['plot', str(tmp_path / 'simulate')])
    assert result.exit_code == 0
    assert 'plots/moments.html' in result.output


def test_density_mass_is_checked_on_a_wide_ball(config_data, tmp_path):
    _, manifest = _run(config_data, tmp_path, 'estimate-density')
    details = _checks(manifest)['density_mass']['details']
    assert details['mass_radius'] == 6.0
    assert all(abs(mass - 1.0) <= details['worst_deviation'] + 1e-12 for mass in details['masses'])
    meta = json.loads((tmp_path / 'estimate-density' / 'density' / 't_0.1.json').read_text(encoding='utf-8'))
    assert meta['ball_mass'] == pytest.approx(1.0, abs=0.05)


def test_density_bandwidth_follows_the_spectrum_proxy(config_data, tmp_path):
    density = {key: value for key, value in config_data['density'].items() if key != 'eta'}
    _, manifest = _run(config_data, tmp_path, 'estimate-density', density=density)
    assert manifest.errors == []
    meta = json.loads((tmp_path / 'estimate-density' / 'density' / 't_0.05.json').read_text(encoding='utf-8'))
    assert meta['lambda1_hat'] > 0
    assert meta['eta'] <= (meta['lambda1_hat'] * config_data['model']['delta']) ** 0.5 + 1e-15


def test_full_suite_does_not_depend_on_workers(config_data, tmp_path):
    _, one = _run(config_data, tmp_path / 'one', 'full-suite', workers=1)
    _, two = _run(config_data, tmp_path / 'two', 'full-suite', workers=2)
    assert one.errors == two.errors
    assert one.artifacts == two.artifacts
    for name in one.artifacts:
        if name == 'manifest.json':
            continue
        first = (tmp_path / 'one' / 'full-suite' / name).read_bytes()
        second = (tmp_path / 'two' / 'full-suite' / name).read_bytes()
        assert first == second, name
    assert [c['status'] for c in one.checks] == [c['status'] for c in two.checks]

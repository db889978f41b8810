"""Разбор и валидация конфигурации"""

import copy
import json

import pytest

from django.conf import settings
from particles.exceptions import ConfigError
from particles.forms import (
    BoundsForm,
    SchemeForm,
    apply_overrides,
    config_from_dict,
    load_config,
    locate_line,
)
from particles.models import ExperimentConfig


def _with(data, section, **changes):
    data = copy.deepcopy(data)
    data.setdefault(section, {}).update(changes)
    return data


def test_valid_config(config_data):
    config = config_from_dict(config_data)
    assert isinstance(config, ExperimentConfig)
    assert config.model.P == 6
    assert config.scheme.P == 4
    assert config.density.x0 == (0.0, 0.0)
    assert config.moments.functions == ('energy', 'v1')


def test_minimal_config_uses_defaults(config_data):
    config = config_from_dict({'model': config_data['model']})
    assert config.experiment == 'simulate'
    assert config.replicas == 1
    assert config.workers == settings.WORKERS
    assert config.output_dir == str(settings.OUTPUT_DIR)
    assert config.recording.every == 0


def test_top_level_seed_wins(config_data):
    config = config_from_dict({**config_data, 'seed': 99})
    assert config.model.seed == 99


def test_unknown_experiment(config_data):
    with pytest.raises(ConfigError) as info:
        config_from_dict({**config_data, 'experiment': 'teleport'})
    assert info.value.field == 'experiment'


def test_unknown_top_level_field(config_data):
    with pytest.raises(ConfigError) as info:
        config_from_dict({**config_data, 'colour': 'blue'})
    assert info.value.field == 'colour'


@pytest.mark.parametrize('changes, message', [
    ({'P': 1}, 'P must be >= 2'),
    ({'delta': 0.0}, 'delta must be positive'),
    ({'T': -1.0}, 'T must be non-negative'),
    ({'d': 4}, 'dimension 4 is not supported'),
    ({'seed': -1}, 'unsigned 64-bit'),
    ({'h': {'kind': 'exponential-floor', 'm': 2.0, 'M': 1.0}}, 'M must be >= m'),
])
def test_model_errors(config_data, changes, message):
    with pytest.raises(ConfigError) as info:
        config_from_dict(_with(config_data, 'model', **changes))
    assert message in str(info.value)
    assert str(info.value).startswith('model.')


def test_degenerate_initial_law(config_data):
    data = _with(config_data, 'model', init={'kind': 'two-point', 'x1': [1.0, 0.0], 'x2': [2.0, 0.0]})
    with pytest.raises(ConfigError) as info:
        config_from_dict(data)
    assert 'degenerate initial law' in str(info.value)
    assert info.value.field == 'model.init'


def test_section_errors(config_data):
    with pytest.raises(ConfigError, match='at least 3 distinct'):
        config_from_dict(_with(config_data, 'scheme', deltas=[0.1, 0.1, 0.01]))
    with pytest.raises(ConfigError, match='inner_steps'):
        config_from_dict(_with(config_data, 'scheme', inner_steps=5))
    with pytest.raises(ConfigError, match='mollifier'):
        config_from_dict(_with(config_data, 'density', mollifier='gaussian'))
    with pytest.raises(ConfigError, match='quantile'):
        config_from_dict(_with(config_data, 'bounds', quantile_low=0.9, quantile_high=0.5))
    with pytest.raises(ConfigError, match='density.x0'):
        config_from_dict(_with(config_data, 'density', x0=[0.0, 0.0, 0.0]))
    with pytest.raises(ConfigError, match='moments.functions'):
        config_from_dict(_with(config_data, 'moments', functions=['v3']))


def test_unknown_section_field(config_data):
    with pytest.raises(ConfigError) as info:
        config_from_dict(_with(config_data, 'density', bandwidth=0.1))
    assert info.value.field == 'density.bandwidth'


def test_section_form_collects_errors():
    form = SchemeForm({'deltas': [0.1], 'inner_steps': 3})
    assert not form.is_valid()
    assert set(form.errors) == {'deltas', 'inner_steps'}
    form = BoundsForm({'n_radii': 8})
    assert form.is_valid()
    assert form.save().n_radii == 8


def test_load_config(config_file):
    config = load_config(config_file)
    assert config.model.seed == 11


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(tmp_path / 'absent.json')
    assert info.value.exit_code == 2


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{\n  "model": ,\n}\n', encoding='utf-8')
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.line == 2


def test_top_level_must_be_object(tmp_path):
    path = tmp_path / 'list.json'
    path.write_text(json.dumps([1, 2]), encoding='utf-8')
    with pytest.raises(ConfigError):
        load_config(path)


@pytest.mark.parametrize('name, experiment', [
    ('maxwellian_d2.json', 'full-suite'),
    ('quick_d2.json', 'full-suite'),
    ('acceptance_energy_d2.json', 'check-moments'),
])
def test_shipped_configs_are_valid(name, experiment):
    config = load_config(settings.BASE_DIR / 'particles' / 'configs' / name)
    assert config.experiment == experiment


def test_energy_acceptance_config_matches_the_reference_run():
    config = load_config(settings.BASE_DIR / 'particles' / 'configs' / 'acceptance_energy_d2.json')
    assert (config.model.d, config.model.P, config.model.delta, config.model.T) == (2, 2000, 1e-3, 1.0)
    assert config.model.h.is_constant and config.model.h.M == 1.0
    assert config.moments.functions == ('energy',) and config.moments.replicas == 20


def test_overrides(config_data):
    config = config_from_dict(config_data)
    changed = apply_overrides(config, seed=5, experiment='check-kernels', workers=None)
    assert changed.model.seed == 5
    assert changed.experiment == 'check-kernels'
    assert changed.workers == config.workers
    assert changed.content_hash() != config.content_hash()


def test_hash_ignores_output_dir_and_workers(config_data):
    config = config_from_dict(config_data)
    moved = apply_overrides(config, output_dir='elsewhere', workers=3)
    assert moved.output_dir == 'elsewhere'
    assert moved.content_hash() == config.content_hash()


def test_round_trip_through_plain_dict(config_data):
    config = config_from_dict(config_data)
    again = config_from_dict(config.to_dict())
    assert again.to_dict() == config.to_dict()
    assert again.content_hash() == config.content_hash()


def test_invalid_value_reports_its_line(tmp_path, config_data):
    data = _with(config_data, 'scheme', inner_steps=3)
    text = json.dumps(data, indent=2)
    path = tmp_path / 'bad_inner_steps.json'
    path.write_text(text, encoding='utf-8')
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.field == 'scheme.inner_steps'
    expected = next(n for n, line in enumerate(text.splitlines(), 1) if '"inner_steps"' in line)
    assert info.value.line == expected
    assert f'(line {expected})' in str(info.value)


def test_locate_line_follows_the_dotted_path():
    text = '{\n  "model": {\n    "P": 5\n  },\n  "scheme": {\n    "P": 3\n  }\n}\n'
    assert locate_line(text, 'scheme.P') == 6
    assert locate_line(text, 'model.P') == 3
    assert locate_line(text, None) is None


@pytest.mark.parametrize('value', [0.0, -1.0])
def test_mass_radius_must_be_positive(config_data, value):
    with pytest.raises(ConfigError) as info:
        config_from_dict(_with(config_data, 'density', mass_radius=value))
    assert info.value.field == 'density.mass_radius'


def test_mass_radius_defaults_to_a_wide_ball(config_data):
    config = config_from_dict(config_data)
    assert config.density.mass_radius == 6.0

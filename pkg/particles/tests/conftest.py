import json
import os

import django
import numpy as np
import pytest

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'landau_lab.settings')
django.setup()

from particles.kernels import make_h
from particles.models import InitialLaw, ModelSpec


@pytest.fixture
def unit_h():
    return make_h('constant', value=1.0)


@pytest.fixture
def floor_h():
    return make_h('exponential-floor', m=0.5, M=2.0)


@pytest.fixture
def small_spec(unit_h):
    """Маленькая парная модель: 6 частиц, 4 шага"""
    return ModelSpec(d=2, h=unit_h, P=6, delta=0.05, T=0.2, seed=11, init=InitialLaw('gaussian'))


@pytest.fixture
def gaussian_samples():
    from particles.rng import keyed_generator

    return keyed_generator(0, 'test-samples').standard_normal((20000, 2))


@pytest.fixture
def config_data():
    """Минимальная конфигурация, которую проходят все формы"""
    return {
        'experiment': 'simulate',
        'replicas': 2,
        'model': {
            'd': 2,
            'h': {'kind': 'constant', 'value': 1.0},
            'P': 6,
            'delta': 0.05,
            'T': 0.2,
            'seed': 11,
            'init': {'kind': 'gaussian'},
        },
        'recording': {'every': 1},
        'kernels': {'samples': 200},
        'scheme': {'deltas': [0.1, 0.05, 0.02], 'replicas': 10, 'inner_steps': 10, 'bootstrap': 20, 'P': 4},
        'density': {'x0': [0.0, 0.0], 'times': [0.05, 0.1], 'replicas': 40, 'eta': 0.3, 'spacing': 0.5,
                    'radius': 1.0, 'P': 4},
        'bounds': {'tail_time': 0.1, 'tail_replicas': 50, 'n_radii': 8, 'qv_delta': 0.01, 'oracle_samples': 2000,
                   'P': 4},
        'moments': {'functions': ['energy', 'v1'], 'window': [0.0, 0.2], 'replicas': 3},
    }


@pytest.fixture
def config_file(tmp_path, config_data):
    path = tmp_path / 'config.json'
    path.write_text(json.dumps(config_data), encoding='utf-8')
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

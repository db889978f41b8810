"""Формы конфигурации эксперимента: разбор JSON и ранняя валидация всех секций"""

import dataclasses
import json
import logging
import math
import re
from pathlib import Path
from typing import Any, Dict, Optional

from django import forms
from django.conf import settings
from django.core.exceptions import NON_FIELD_ERRORS

from .exceptions import ConfigError
from .kernels import check_h_bounds, h_from_dict, SUPPORTED_DIMENSIONS
from .models import (
    EXPERIMENTS,
    SCHEMES,
    BoundsSection,
    DensitySection,
    ExperimentConfig,
    InitialLaw,
    KernelSection,
    ModelSpec,
    MomentsSection,
    RecordingPlan,
    SchemeSection,
)
from .density_estimation import MOLLIFIER_KINDS
from .simulator import init_population

logger = logging.getLogger(__name__)


def _bindable(value):
    """Значение, которое понимают поля формы: dataclass -> dict, кортеж -> список"""
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        value = value.to_dict() if hasattr(value, 'to_dict') else dataclasses.asdict(value)
    if isinstance(value, dict):
        return {k: _bindable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_bindable(v) for v in value]
    return value


class NumberListField(forms.Field):
    """Список конечных чисел; length - точная длина, если задана"""

    default_error_messages = {
        'invalid': 'must be a list of finite numbers',
        'length': 'must hold exactly %(length)s numbers',
    }

    def __init__(self, *, length=None, **kwargs):
        self.length = length
        super().__init__(**kwargs)

    def to_python(self, value):
        if value in self.empty_values:
            return ()
        if isinstance(value, (str, dict)) or not hasattr(value, '__iter__'):
            raise forms.ValidationError(self.error_messages['invalid'], code='invalid')
        try:
            numbers = tuple(float(x) for x in value)
        except (TypeError, ValueError):
            raise forms.ValidationError(self.error_messages['invalid'], code='invalid')
        if not all(math.isfinite(x) for x in numbers):
            raise forms.ValidationError(self.error_messages['invalid'], code='invalid')
        return numbers

    def validate(self, value):
        super().validate(value)
        if self.length is not None and value and len(value) != self.length:
            raise forms.ValidationError(self.error_messages['length'], code='length', params={'length': self.length})


class NamesField(forms.Field):
    """Строка или список строк"""

    def to_python(self, value):
        if value in self.empty_values:
            return ()
        if isinstance(value, str):
            return (value,)
        return tuple(str(v) for v in value)


class SectionField(forms.JSONField):
    """Вложенная секция: JSON-объект, проверяется своей формой"""

    def validate(self, value):
        super().validate(value)
        if value is not None and not isinstance(value, dict):
            raise forms.ValidationError('section must be an object', code='invalid')


def positive_int(name, **kwargs):
    message = f'{name} must be a positive integer'
    return forms.IntegerField(min_value=1, error_messages={'min_value': message, 'invalid': message}, **kwargs)


def finite_float(name, **kwargs):
    return forms.FloatField(error_messages={'invalid': f'{name} must be a finite number'}, **kwargs)


def optional_population():
    message = 'P must be >= 2'
    return forms.IntegerField(required=False, min_value=2, error_messages={'min_value': message, 'invalid': message})


class ConfigForm(forms.Form):
    """Форма одной секции: умолчания берутся из dataclass section_class, неизвестные ключи - ошибка"""

    section = ''
    section_class = None

    def __init__(self, data: Optional[Dict[str, Any]] = None, **kwargs):
        if data is not None and not isinstance(data, dict):
            raise ConfigError('section must be an object', field=self.section or None)
        self.raw_keys = set(data or {})
        super().__init__(data=_bindable({**self.defaults(), **(data or {})}), **kwargs)

    def defaults(self) -> Dict[str, Any]:
        if self.section_class is None:
            return {}
        out = {}
        for f in dataclasses.fields(self.section_class):
            if f.default is not dataclasses.MISSING:
                out[f.name] = f.default
            elif f.default_factory is not dataclasses.MISSING:
                out[f.name] = f.default_factory()
        return out

    def full_clean(self):
        super().full_clean()
        for key in sorted(self.raw_keys - set(self.fields)):
            self._errors[key] = self.error_class(['unknown field'])

    def _positive(self, name):
        value = self.cleaned_data.get(name)
        if value is not None and not (value > 0):
            raise forms.ValidationError(f'{name} must be positive')
        return value

    def first_error(self) -> ConfigError:
        name, messages = next(iter(self.errors.get_json_data().items()))
        if name == NON_FIELD_ERRORS:
            prefix = self.section or None
        else:
            prefix = f'{self.section}.{name}' if self.section else name
        return ConfigError(messages[0]['message'], field=prefix)

    def save(self):
        return self.section_class(**{name: self.cleaned_data[name] for name in self.fields})

    def validate(self):
        """Проверенный объект секции или ConfigError с путём до первого плохого поля"""
        if not self.is_valid():
            raise self.first_error()
        return self.save()


class RecordingForm(ConfigForm):
    section = 'recording'
    section_class = RecordingPlan

    every = forms.IntegerField(min_value=0, error_messages={
        'min_value': 'every must be a non-negative integer',
        'invalid': 'every must be a non-negative integer',
    })
    tagged_path = forms.BooleanField(required=False)
    moments = forms.BooleanField(required=False)
    tagged_coefficients = forms.BooleanField(required=False)
    keep_populations = forms.BooleanField(required=False)


class KernelForm(ConfigForm):
    section = 'kernels'
    section_class = KernelSection

    samples = positive_int('samples')


class SchemeForm(ConfigForm):
    section = 'scheme'
    section_class = SchemeSection

    deltas = NumberListField()
    replicas = positive_int('replicas')
    inner_steps = forms.IntegerField(min_value=10, error_messages={
        'min_value': 'inner_steps must be >= 10',
        'invalid': 'inner_steps must be an integer',
    })
    bootstrap = positive_int('bootstrap')
    P = optional_population()

    def clean_deltas(self):
        deltas = self.cleaned_data['deltas']
        if any(not (x > 0) for x in deltas):
            raise forms.ValidationError('deltas must be positive')
        if len(set(deltas)) < 3:
            raise forms.ValidationError('deltas must hold at least 3 distinct values')
        return deltas


class DensityForm(ConfigForm):
    section = 'density'
    section_class = DensitySection

    x0 = NumberListField()
    times = NumberListField(error_messages={'required': 'times must be a non-empty list of positive values'})
    radius = finite_float('radius')
    mass_radius = finite_float('mass_radius')
    spacing = finite_float('spacing')
    mollifier = forms.ChoiceField(choices=[(kind, kind) for kind in MOLLIFIER_KINDS],
                                  error_messages={'invalid_choice': f'mollifier must be one of {MOLLIFIER_KINDS}'})
    eta = finite_float('eta', required=False)
    pool_all = forms.BooleanField(required=False)
    replicas = positive_int('replicas')
    P = optional_population()

    def clean_times(self):
        times = self.cleaned_data['times']
        if any(not (t > 0) for t in times):
            raise forms.ValidationError('times must be a non-empty list of positive values')
        return times

    def clean_radius(self):
        return self._positive('radius')

    def clean_mass_radius(self):
        return self._positive('mass_radius')

    def clean_spacing(self):
        return self._positive('spacing')

    def clean_eta(self):
        return self._positive('eta')


class BoundsForm(ConfigForm):
    section = 'bounds'
    section_class = BoundsSection

    tail_time = finite_float('tail_time')
    tail_replicas = positive_int('tail_replicas')
    quantile_low = forms.FloatField()
    quantile_high = forms.FloatField()
    n_radii = forms.IntegerField(min_value=4, error_messages={
        'min_value': 'n_radii must be >= 4',
        'invalid': 'n_radii must be an integer',
    })
    max_violation_fraction = forms.FloatField(min_value=0.0, error_messages={
        'min_value': 'max_violation_fraction must lie in [0, 1)',
    })
    significance = finite_float('significance')
    qv_delta = finite_float('qv_delta')
    oracle_samples = positive_int('oracle_samples')
    P = optional_population()

    def clean_tail_time(self):
        return self._positive('tail_time')

    def clean_significance(self):
        return self._positive('significance')

    def clean_qv_delta(self):
        return self._positive('qv_delta')

    def clean_max_violation_fraction(self):
        value = self.cleaned_data['max_violation_fraction']
        if not value < 1:
            raise forms.ValidationError('max_violation_fraction must lie in [0, 1)')
        return value

    def clean(self):
        cleaned = super().clean()
        low, high = cleaned.get('quantile_low'), cleaned.get('quantile_high')
        if low is not None and high is not None and not (0 < low < high < 1):
            self.add_error('quantile_low', 'quantiles must satisfy 0 < quantile_low < quantile_high < 1')
        return cleaned


class MomentsForm(ConfigForm):
    section = 'moments'
    section_class = MomentsSection

    functions = NamesField(error_messages={'required': 'functions must not be empty'})
    window = NumberListField(length=2)
    replicas = positive_int('replicas')

    def clean_window(self):
        lo, hi = self.cleaned_data['window']
        if not (0 <= lo < hi):
            raise forms.ValidationError('window must satisfy 0 <= start < end')
        return lo, hi


class ModelSpecForm(ConfigForm):
    """Секция model: собирает ModelSpec и сразу проверяет H3 на выборке начального закона"""

    section = 'model'
    section_class = ModelSpec

    d = forms.IntegerField(error_messages={'invalid': 'd must be an integer'})
    h = forms.JSONField(error_messages={'required': 'h must be an object with a kind'})
    P = forms.IntegerField(min_value=2, error_messages={'min_value': 'P must be >= 2', 'invalid': 'P must be an integer'})
    delta = forms.FloatField(error_messages={'invalid': 'delta must be a finite number'})
    T = forms.FloatField(min_value=0.0, error_messages={'min_value': 'T must be non-negative'})
    scheme = forms.ChoiceField(choices=[(s, s) for s in SCHEMES],
                               error_messages={'invalid_choice': f'scheme must be one of {SCHEMES}'})
    seed = forms.IntegerField(min_value=0, max_value=2 ** 64 - 1, error_messages={
        'min_value': 'seed must be an unsigned 64-bit integer',
        'max_value': 'seed must be an unsigned 64-bit integer',
        'invalid': 'seed must be an unsigned 64-bit integer',
    })
    init = forms.JSONField(error_messages={'required': 'init must be an object with a kind'})

    def clean_d(self):
        d = self.cleaned_data['d']
        if d not in SUPPORTED_DIMENSIONS:
            raise forms.ValidationError(f'dimension {d} is not supported, expected 2 or 3')
        return d

    def clean_h(self):
        value = self.cleaned_data['h']
        if not isinstance(value, dict):
            raise forms.ValidationError('h must be an object with a kind')
        try:
            return h_from_dict(value)
        except (ConfigError, TypeError) as e:
            raise forms.ValidationError(getattr(e, 'detail', str(e)))

    def clean_delta(self):
        value = self.cleaned_data['delta']
        if not (value > 0):
            raise forms.ValidationError('delta must be positive')
        return value

    def clean_init(self):
        value = self.cleaned_data['init']
        if not isinstance(value, dict):
            raise forms.ValidationError('init must be an object with a kind')
        data = {}
        for key, item in value.items():
            if isinstance(item, list):
                item = tuple(tuple(v) if isinstance(v, list) else v for v in item)
            data[key] = item
        try:
            return InitialLaw(**data)
        except (ConfigError, TypeError) as e:
            raise forms.ValidationError(getattr(e, 'detail', str(e)))

    def clean(self):
        cleaned = super().clean()
        if self.errors:
            return cleaned
        try:
            spec = ModelSpec(**{name: cleaned[name] for name in self.fields})
            if not check_h_bounds(spec.h):
                raise ConfigError('h leaves its declared bounds [m, M]', field='h')
            init_population(spec)
        except ConfigError as e:
            name = (e.field or '').split('.')[0]
            self.add_error(name if name in self.fields else None, e.detail)
            return cleaned
        self.spec = spec
        return cleaned

    def save(self) -> ModelSpec:
        return self.spec


SECTION_FORMS = {
    'recording': RecordingForm,
    'kernels': KernelForm,
    'scheme': SchemeForm,
    'density': DensityForm,
    'bounds': BoundsForm,
    'moments': MomentsForm,
}


class ExperimentConfigForm(ConfigForm):
    """Конфигурация целиком: верхние поля, затем формы секций по порядку"""

    experiment = forms.ChoiceField(choices=[(e, e) for e in EXPERIMENTS], error_messages={
        'invalid_choice': f'unknown experiment %(value)r, expected one of {EXPERIMENTS}',
    })
    seed = forms.IntegerField(required=False)
    replicas = positive_int('replicas')
    output_dir = forms.CharField()
    strict = forms.BooleanField(required=False)
    workers = positive_int('workers')
    model = SectionField(error_messages={'required': 'model section is required'})
    recording = SectionField(required=False)
    kernels = SectionField(required=False)
    scheme = SectionField(required=False)
    density = SectionField(required=False)
    bounds = SectionField(required=False)
    moments = SectionField(required=False)

    def defaults(self) -> Dict[str, Any]:
        return {
            'experiment': 'simulate',
            'replicas': 1,
            'output_dir': str(settings.OUTPUT_DIR),
            'strict': False,
            'workers': settings.WORKERS,
        }

    def save(self) -> ExperimentConfig:
        cleaned = self.cleaned_data
        model_data = dict(cleaned['model'])
        if cleaned['seed'] is not None:
            model_data['seed'] = cleaned['seed']
        out = {'model': ModelSpecForm(model_data).validate()}
        for name, form_class in SECTION_FORMS.items():
            out[name] = form_class(cleaned[name]).validate()
        out.update({key: cleaned[key] for key in ('experiment', 'replicas', 'output_dir', 'strict', 'workers')})
        self._check_cross_section(out)
        return ExperimentConfig(**out)

    def _check_cross_section(self, out):
        spec = out['model']
        if len(out['density'].x0) != spec.d:
            raise ConfigError(f'x0 must have {spec.d} coordinates', field='density.x0')
        from .weakform_checker import TestFunction
        for name in out['moments'].functions:
            TestFunction.from_name(name, spec.d)


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    return ExperimentConfigForm(data).validate()


def locate_line(text: str, field: Optional[str]) -> Optional[int]:
    """Строка JSON-текста, где стоит ключ field (путь через точку)"""
    if not field:
        return None
    position = None
    for part in field.split('.'):
        match = re.compile(rf'"{re.escape(part)}"\s*:').search(text, position or 0)
        if match is None:
            break
        position = match.start()
    if position is None:
        return None
    return text.count('\n', 0, position) + 1


def load_config(path) -> ExperimentConfig:
    """Читает и валидирует JSON-конфигурацию"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f'config file not found: {path}', field='config')
    text = path.read_text(encoding='utf-8')
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f'parse error: {e.msg} (column {e.colno})', line=e.lineno)
    if not isinstance(data, dict):
        raise ConfigError('top level of the config must be an object', line=1)
    try:
        config = config_from_dict(data)
    except ConfigError as e:
        if e.line is None:
            e.at_line(locate_line(text, e.field))
        raise
    logger.info(f'Конфигурация {path.name}: {config.experiment}, хеш {config.content_hash()[:12]}')
    return config


def apply_overrides(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Переопределения из командной строки; None - оставить как есть. Результат валидируется заново"""
    data = config.to_dict()
    for key in ('experiment', 'replicas', 'output_dir', 'strict', 'workers'):
        if overrides.get(key) is not None:
            data[key] = overrides[key]
    if overrides.get('seed') is not None:
        data['model']['seed'] = overrides['seed']
    return config_from_dict(data)

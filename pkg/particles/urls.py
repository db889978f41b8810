"""Маршруты: имя эксперимента -> конвейер"""

from django.urls import NoReverseMatch, path, resolve, reverse

from . import views
from .exceptions import ConfigError
from .models import EXPERIMENTS

urlpatterns = [
    path('simulate/', views.simulate, name='simulate'),
    path('scheme/', views.analyze_scheme, name='analyze-scheme'),
    path('density/', views.estimate_density, name='estimate-density'),
    path('bounds/', views.verify_bounds, name='verify-bounds'),
    path('moments/', views.check_moments, name='check-moments'),
    path('kernels/', views.check_kernels, name='check-kernels'),

    # все этапы подряд
    path('', views.full_suite, name='full-suite'),
]


def resolve_experiment(name: str):
    """Конвейер эксперимента по имени маршрута"""
    try:
        return resolve(reverse(name)).func
    except NoReverseMatch:
        raise ConfigError(f'unknown experiment {name!r}, expected one of {EXPERIMENTS}', field='experiment')

"""Командная строка лаборатории: подкоманда на каждый вид эксперимента и plot"""

import logging
import os
import sys

import click
import django
from django.conf import settings

from particles.exceptions import LabError
from particles.forms import apply_overrides, load_config
from particles.models import EXPERIMENTS

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'landau_lab.settings')

logger = logging.getLogger(__name__)


def experiment_options(func):
    """Общие флаги всех экспериментов"""
    options = [
        click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                     help='JSON-конфигурация (по умолчанию LANDAU_LAB_DEFAULT_CONFIG).'),
        click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=None, help='Мастер-сид.'),
        click.option('--out', 'output_dir', type=click.Path(file_okay=False), default=None,
                     help='Каталог результатов.'),
        click.option('--strict/--no-strict', default=None, help='Ненулевой код выхода при проваленной проверке.'),
        click.option('--workers', type=click.IntRange(min=1), default=None, help='Число процессов для реплик.'),
        click.option('--replicas', type=click.IntRange(min=1), default=None, help='Число реплик.'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _execute(experiment, config_path, seed, output_dir, strict, workers, replicas):
    from particles.views import run_experiment

    try:
        config = load_config(config_path or settings.DEFAULT_CONFIG)
        config = apply_overrides(
            config,
            experiment=experiment,
            seed=seed,
            output_dir=output_dir,
            strict=strict,
            workers=workers,
            replicas=replicas,
        )
    except LabError as e:
        click.echo(f'Ошибка конфигурации: {e}', err=True)
        sys.exit(e.exit_code)

    manifest = run_experiment(config)
    for check in manifest.checks:
        click.echo(f"{check['status']:>12}  {check['name']}")
    for error in manifest.errors:
        click.echo(f"{'error':>12}  {error['type']}: {error['message']}", err=True)
    status = manifest.exit_status(config.strict)
    click.echo(f'Результаты: {config.output_dir} (код {status})')
    sys.exit(status)


@click.group()
@click.option('--log-level', default=None, help='Уровень логирования (иначе LANDAU_LAB_LOG_LEVEL).')
def cli(log_level):
    """Лаборатория частиц для нелинейного СДУ Ландау."""
    # django.setup() применяет settings.LOGGING
    django.setup()
    if log_level:
        for name in ('particles', 'landau_lab'):
            logging.getLogger(name).setLevel(log_level.upper())


def _make_command(experiment: str):
    @experiment_options
    def command(config_path, seed, output_dir, strict, workers, replicas):
        _execute(experiment, config_path, seed, output_dir, strict, workers, replicas)

    command.__doc__ = f'Эксперимент {experiment}.'
    return click.command(name=experiment)(command)


for _name in EXPERIMENTS:
    cli.add_command(_make_command(_name))


@cli.command(name='run')
@experiment_options
def run_command(config_path, seed, output_dir, strict, workers, replicas):
    """Эксперимент, указанный в самой конфигурации."""
    _execute(None, config_path, seed, output_dir, strict, workers, replicas)


@cli.command(name='plot')
@click.argument('run_dir', type=click.Path(exists=True, file_okay=False))
def plot_command(run_dir):
    """HTML-графики по артефактам прогона."""
    from particles.views import render_plots

    try:
        written = render_plots(run_dir)
    except LabError as e:
        click.echo(str(e), err=True)
        sys.exit(e.exit_code)
    for name in written:
        click.echo(name)


def main():
    cli(prog_name='manage.py')


if __name__ == '__main__':
    main()

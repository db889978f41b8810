#!/usr/bin/env python
"""Точка входа лаборатории: python manage.py <эксперимент> [флаги]"""
import os
import sys


def main():
    """Запускает группу команд click из landau_lab.cli."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'landau_lab.settings')
    os.environ.setdefault('LANDAU_LAB_DEFAULT_CONFIG', os.path.join(
        os.path.dirname(os.path.abspath(__file__)), 'particles', 'configs', 'maxwellian_d2.json'))
    try:
        from landau_lab.cli import cli
    except ImportError as exc:
        raise ImportError(
            'Не удалось импортировать зависимости лаборатории (django, click, numpy, scipy). '
            'Установите их командой pip install -r requirements.txt в активном виртуальном окружении.'
        ) from exc
    cli(args=sys.argv[1:], prog_name='manage.py')


if __name__ == '__main__':
    main()

"""Запись CSV/JSON артефактов прогона; каждый файл попадает в манифест"""

import json
import logging
from pathlib import Path
from typing import Any

import pandas as pd

from .density_estimation import DensityField
from .exceptions import AnalysisError
from .models import ModelSpec, Population, RunManifest, normalize
from .simulator import write_snapshot

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'


def dumps(data: Any) -> str:
    """Детерминированный JSON: отсортированные ключи, repr для чисел"""
    return json.dumps(normalize(data), indent=2, sort_keys=True, ensure_ascii=False) + '\n'


class ArtifactWriter:
    """Пишет файлы в каталог прогона и регистрирует их в манифесте"""

    def __init__(self, root, manifest: RunManifest):
        self.root = Path(root)
        self.manifest = manifest
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        target = self.root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def _register(self, target: Path) -> Path:
        self.manifest.add_artifact(target.relative_to(self.root).as_posix())
        logger.debug(f'Записан {target}')
        return target

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        target = self.path(name)
        frame.to_csv(target, index=False, float_format='%.17g', lineterminator='\n')
        return self._register(target)

    def write_json(self, name: str, data: Any) -> Path:
        target = self.path(name)
        target.write_text(dumps(data), encoding='utf-8')
        return self._register(target)

    def write_text(self, name: str, text: str) -> Path:
        target = self.path(name)
        target.write_text(text, encoding='utf-8')
        return self._register(target)

    def write_snapshot(self, name: str, pop: Population, spec: ModelSpec) -> Path:
        return self._register(write_snapshot(self.path(name), pop, spec))

    def write_density(self, stem: str, density: DensityField, spec_hash: str) -> Path:
        """CSV поля и JSON метаданных рядом"""
        self.write_json(f'{stem}.json', {**density.metadata(), 'spec_hash': spec_hash})
        return self.write_frame(f'{stem}.csv', density.to_frame())

    def write_manifest(self) -> Path:
        target = self.path(MANIFEST_NAME)
        self.manifest.add_artifact(MANIFEST_NAME)
        target.write_text(dumps(self.manifest.to_dict()), encoding='utf-8')
        return target


def read_manifest(root) -> RunManifest:
    """Манифест готового прогона"""
    target = Path(root) / MANIFEST_NAME
    if not target.is_file():
        raise AnalysisError(f'no {MANIFEST_NAME} in {root}')
    return RunManifest.from_dict(json.loads(target.read_text(encoding='utf-8')))

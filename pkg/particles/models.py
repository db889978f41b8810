"""Модели данных лаборатории: спецификация модели, популяция, траектория, конфигурация и манифест"""

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Any, Tuple

import numpy as np
import pandas as pd

from .exceptions import ConfigError, UnsupportedDimensionError
from .kernels import HFunction, h_from_dict, SUPPORTED_DIMENSIONS


SCHEMES = ('pairwise-shared-noise', 'meanfield-gaussian')

INIT_KINDS = ('gaussian', 'two-point', 'uniform-ball', 'empirical')

EXPERIMENTS = (
    'simulate',
    'analyze-scheme',
    'estimate-density',
    'verify-bounds',
    'check-moments',
    'check-kernels',
    'full-suite',
)


def canonical_json(data: Any) -> str:
    """Каноническая сериализация для хеширования"""
    return json.dumps(normalize(data), sort_keys=True, separators=(',', ':'))


def normalize(value):
    if isinstance(value, dict):
        return {str(k): normalize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [normalize(v) for v in value]
    if isinstance(value, np.ndarray):
        return [normalize(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        # одинаковое десятичное представление на всех платформах
        return float(repr(float(value)))
    if isinstance(value, Path):
        return str(value)
    return value


def content_hash(data: Any) -> str:
    return hashlib.sha256(canonical_json(data).encode('utf-8')).hexdigest()


@dataclass(frozen=True)
class InitialLaw:
    """Начальный закон X_0"""

    kind: str = 'gaussian'
    mean: Optional[Tuple[float, ...]] = None
    covariance: Optional[Tuple[Tuple[float, ...], ...]] = None
    x1: Optional[Tuple[float, ...]] = None
    x2: Optional[Tuple[float, ...]] = None
    center: Optional[Tuple[float, ...]] = None
    radius: float = 1.0
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ConfigError(f'unknown initial law {self.kind!r}, expected one of {INIT_KINDS}', field='init.kind')
        if self.kind == 'two-point' and (self.x1 is None or self.x2 is None):
            raise ConfigError('two-point law requires x1 and x2', field='init')
        if self.kind == 'uniform-ball' and not (self.radius > 0):
            raise ConfigError('radius must be positive', field='init.radius')
        if self.kind == 'empirical' and not self.path:
            raise ConfigError('empirical law requires a file path', field='init.path')

    def sample(self, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
        """n независимых реализаций закона в R^d"""
        if self.kind == 'gaussian':
            mean = np.zeros(d) if self.mean is None else np.asarray(self.mean, dtype=float)
            cov = np.eye(d) if self.covariance is None else np.asarray(self.covariance, dtype=float)
            chol = np.linalg.cholesky(cov)
            return mean + rng.standard_normal((n, d)) @ chol.T
        if self.kind == 'two-point':
            points = np.array([self.x1, self.x2], dtype=float)
            return points[rng.integers(0, 2, size=n)]
        if self.kind == 'uniform-ball':
            center = np.zeros(d) if self.center is None else np.asarray(self.center, dtype=float)
            direction = rng.standard_normal((n, d))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            radius = self.radius * rng.random(n) ** (1.0 / d)
            return center + direction * radius[:, None]
        table = load_empirical_table(self.path)
        if table.shape[1] != d:
            raise ConfigError(f'empirical file has {table.shape[1]} columns, expected {d}', field='init.path')
        return table[rng.integers(0, table.shape[0], size=n)]

    def dimension_hint(self) -> Optional[int]:
        for vector in (self.mean, self.x1, self.center):
            if vector is not None:
                return len(vector)
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v is not None}


def load_empirical_table(path) -> np.ndarray:
    """Читает точки эмпирического закона (CSV, строки - точки)"""
    frame = pd.read_csv(path, comment='#', header=None)
    values = frame.to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise ConfigError('empirical file contains non-finite values', field='init.path')
    return values


@dataclass(frozen=True)
class ModelSpec:
    """Параметры модели и схемы дискретизации"""

    d: int
    h: HFunction
    P: int
    delta: float
    T: float
    scheme: str = 'pairwise-shared-noise'
    seed: int = 0
    init: InitialLaw = field(default_factory=InitialLaw)

    def __post_init__(self):
        if self.d not in SUPPORTED_DIMENSIONS:
            raise UnsupportedDimensionError(self.d)
        if self.P < 2:
            raise ConfigError('P must be >= 2', field='P')
        if not (self.delta > 0):
            raise ConfigError('delta must be positive', field='delta')
        if self.T < 0:
            raise ConfigError('T must be non-negative', field='T')
        if self.T > 0 and self.delta > self.T:
            raise ConfigError('delta must not exceed T', field='delta')
        if self.T > 0 and abs(self.n_steps * self.delta - self.T) > 1e-9 * self.T:
            raise ConfigError('T must be an integer multiple of delta', field='T')
        if self.scheme not in SCHEMES:
            raise ConfigError(f'unknown scheme {self.scheme!r}, expected one of {SCHEMES}', field='scheme')
        hint = self.init.dimension_hint()
        if hint is not None and hint != self.d:
            raise ConfigError(f'initial law lives in R^{hint}, model has d={self.d}', field='init')

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.delta))

    def replace(self, **changes) -> 'ModelSpec':
        data = {k: getattr(self, k) for k in ('d', 'h', 'P', 'delta', 'T', 'scheme', 'seed', 'init')}
        data.update(changes)
        return ModelSpec(**data)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'd': self.d,
            'h': self.h.to_dict(),
            'P': self.P,
            'delta': self.delta,
            'T': self.T,
            'scheme': self.scheme,
            'seed': self.seed,
            'init': self.init.to_dict(),
        }

    def content_hash(self) -> str:
        return content_hash(self.to_dict())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelSpec':
        init = data.get('init', {})
        return cls(
            d=int(data['d']),
            h=data['h'] if isinstance(data['h'], HFunction) else h_from_dict(data['h']),
            P=int(data['P']),
            delta=float(data['delta']),
            T=float(data['T']),
            scheme=data.get('scheme', 'pairwise-shared-noise'),
            seed=int(data.get('seed', 0)),
            init=init if isinstance(init, InitialLaw) else InitialLaw(**_tuplify(init)),
        )


def _tuplify(data: Dict[str, Any]) -> Dict[str, Any]:
    out = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        out[key] = value
    return out


@dataclass
class Population:
    """Скорости P частиц в момент t"""

    t: float
    X: np.ndarray
    tagged: int = 0
    seed: int = 0
    replica: int = 0
    step_index: int = 0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if not (0 <= self.tagged < self.X.shape[0]):
            raise ConfigError(f'tagged index {self.tagged} outside [0, {self.X.shape[0]})', field='tagged')

    @property
    def P(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def tagged_position(self) -> np.ndarray:
        return self.X[self.tagged]

    def advanced(self, X: np.ndarray, delta: float) -> 'Population':
        return Population(
            t=self.t + delta,
            X=X,
            tagged=self.tagged,
            seed=self.seed,
            replica=self.replica,
            step_index=self.step_index + 1,
        )


@dataclass(frozen=True)
class RecordingPlan:
    """Что записывать во время прогона"""

    every: int = 0
    tagged_path: bool = True
    moments: bool = True
    tagged_coefficients: bool = False
    keep_populations: bool = True

    def __post_init__(self):
        if self.every < 0:
            raise ConfigError('every must be >= 0', field='recording.every')

    def records_step(self, k: int, n_steps: int) -> bool:
        if k == 0 or k == n_steps:
            return True
        return self.every > 0 and k % self.every == 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class Trajectory:
    """Результат прогона: снимки популяции, путь меченой частицы, моменты"""

    spec: ModelSpec
    plan: RecordingPlan
    replica: int = 0
    populations: List[Population] = field(default_factory=list)
    times: List[float] = field(default_factory=list)
    tagged_path: List[np.ndarray] = field(default_factory=list)
    moments: List[Dict[str, float]] = field(default_factory=list)
    tagged_A: List[np.ndarray] = field(default_factory=list)
    tagged_B: List[np.ndarray] = field(default_factory=list)

    @property
    def initial(self) -> Population:
        return self.populations[0]

    @property
    def final(self) -> Population:
        return self.populations[-1]

    def tagged_array(self) -> np.ndarray:
        return np.asarray(self.tagged_path, dtype=float)

    def time_grid(self) -> np.ndarray:
        return np.asarray(self.times, dtype=float)

    def moments_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.moments)


@dataclass(frozen=True)
class KernelSection:
    samples: int = 10000


@dataclass(frozen=True)
class SchemeSection:
    deltas: Tuple[float, ...] = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)
    replicas: int = 1000
    inner_steps: int = 50
    bootstrap: int = 500
    P: Optional[int] = None


@dataclass(frozen=True)
class DensitySection:
    x0: Tuple[float, ...] = (1.0, 0.0)
    times: Tuple[float, ...] = (0.25, 0.5, 1.0)
    radius: float = 3.0
    mass_radius: float = 6.0
    spacing: float = 0.25
    mollifier: str = 'bump'
    eta: Optional[float] = None
    pool_all: bool = False
    replicas: int = 10000
    P: Optional[int] = None


@dataclass(frozen=True)
class BoundsSection:
    tail_time: float = 1.0
    tail_replicas: int = 10000
    quantile_low: float = 0.5
    quantile_high: float = 0.999
    n_radii: int = 24
    max_violation_fraction: float = 0.01
    significance: float = 3.0
    qv_delta: float = 1e-4
    oracle_samples: int = 20000
    P: Optional[int] = None


@dataclass(frozen=True)
class MomentsSection:
    functions: Tuple[str, ...] = ('energy', 'v1', 'v1v2')
    window: Tuple[float, float] = (0.0, 1.0)
    replicas: int = 20


@dataclass(frozen=True)
class ExperimentConfig:
    """Полная конфигурация эксперимента"""

    model: ModelSpec
    experiment: str = 'simulate'
    recording: RecordingPlan = field(default_factory=RecordingPlan)
    replicas: int = 1
    output_dir: str = 'runs'
    strict: bool = False
    workers: int = 1
    kernels: KernelSection = field(default_factory=KernelSection)
    scheme: SchemeSection = field(default_factory=SchemeSection)
    density: DensitySection = field(default_factory=DensitySection)
    bounds: BoundsSection = field(default_factory=BoundsSection)
    moments: MomentsSection = field(default_factory=MomentsSection)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'experiment': self.experiment,
            'model': self.model.to_dict(),
            'recording': self.recording.to_dict(),
            'replicas': self.replicas,
            'output_dir': self.output_dir,
            'strict': self.strict,
            'workers': self.workers,
            'kernels': asdict(self.kernels),
            'scheme': asdict(self.scheme),
            'density': asdict(self.density),
            'bounds': asdict(self.bounds),
            'moments': asdict(self.moments),
        }

    def content_hash(self) -> str:
        # каталог вывода и число воркеров не влияют на численный результат
        data = self.to_dict()
        data.pop('output_dir')
        data.pop('workers')
        return content_hash(data)


@dataclass
class RunManifest:
    """Манифест прогона: хеш конфигурации, проверки, список артефактов"""

    config_hash: str
    seed: int
    code_version: str
    experiment: str
    started_at: str = ''
    finished_at: str = ''
    checks: List[Dict[str, Any]] = field(default_factory=list)
    artifacts: List[str] = field(default_factory=list)
    errors: List[Dict[str, Any]] = field(default_factory=list)

    def add_check(self, name: str, passed: Optional[bool], status: Optional[str] = None, **details):
        if status is None:
            status = 'pass' if passed else 'fail'
        self.checks.append({'name': name, 'passed': passed, 'status': status, 'details': normalize(details)})

    def add_artifact(self, relative_path: str):
        if relative_path not in self.artifacts:
            self.artifacts.append(relative_path)

    def add_error(self, error):
        self.errors.append(error.to_dict() if hasattr(error, 'to_dict') else {'type': type(error).__name__, 'message': str(error)})

    @property
    def failed_checks(self) -> List[Dict[str, Any]]:
        return [c for c in self.checks if c['status'] == 'fail']

    def exit_status(self, strict: bool) -> int:
        if self.errors:
            return max(int(e.get('exit_code', 2)) for e in self.errors)
        if strict and self.failed_checks:
            return 1
        return 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunManifest':
        return cls(**data)

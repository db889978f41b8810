"""Ядерная оценка условной плотности меченой частицы с молифаером phi_eta в роли ядра"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Dict, Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import integrate, special

from .exceptions import AnalysisError, ConfigError
from .models import ModelSpec
from .simulator import init_population, pair_coefficients, STEPPERS

logger = logging.getLogger(__name__)

MOLLIFIER_KINDS = ('bump', 'product-cosine')

MIN_SAMPLES = 100


def _bump(s):
    inside = s < 1.0
    safe = np.where(inside, 1.0 - s, 1.0)
    return np.where(inside, np.exp(-1.0 / safe), 0.0)


def _base(kind, u):
    u = np.asarray(u, dtype=float)
    s = np.einsum('...i,...i->...', u, u)
    if kind == 'bump':
        return _bump(s)
    return np.where(s < 1.0, np.prod(np.cos(0.5 * np.pi * u) ** 2, axis=-1), 0.0)


@lru_cache(maxsize=16)
def normalization_constant(kind: str, d: int) -> float:
    """Интеграл ненормированного phi по единичному шару"""
    if kind == 'bump':
        sphere = 2.0 * math.pi ** (d / 2.0) / special.gamma(d / 2.0)
        radial, _ = integrate.quad(lambda r: math.exp(-1.0 / (1.0 - r * r)) * r ** (d - 1), 0.0, 1.0,
                                   epsabs=1e-13, epsrel=1e-12)
        return float(sphere * radial)
    f = lambda *u: float(_base('product-cosine', np.array(u)))  # noqa: E731
    if d == 2:
        value, _ = integrate.dblquad(lambda y, x: f(x, y), -1.0, 1.0,
                                     lambda x: -math.sqrt(1 - x * x), lambda x: math.sqrt(1 - x * x),
                                     epsabs=1e-11, epsrel=1e-10)
    elif d == 3:
        value, _ = integrate.tplquad(lambda z, y, x: f(x, y, z), -1.0, 1.0,
                                     lambda x: -math.sqrt(1 - x * x), lambda x: math.sqrt(1 - x * x),
                                     lambda x, y: -math.sqrt(max(0.0, 1 - x * x - y * y)),
                                     lambda x, y: math.sqrt(max(0.0, 1 - x * x - y * y)),
                                     epsabs=1e-10, epsrel=1e-9)
    else:
        raise ConfigError(f'product-cosine mollifier supports d in (2, 3), got {d}', field='d')
    return float(value)


@dataclass(frozen=True)
class Mollifier:
    """phi_eta(x) = eta^{-d} phi(x / eta), phi = 0 вне единичного шара, int phi = 1"""

    kind: str
    eta: float
    d: int
    norm: float

    def phi(self, u):
        return _base(self.kind, u) / self.norm

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.eta ** (-self.d) * self.phi(x / self.eta)

    @property
    def peak(self) -> float:
        """phi_eta(0), верхняя граница значений оценки"""
        return float(self(np.zeros(self.d)))


def make_mollifier(kind: str, eta: float, d: int = 2) -> Mollifier:
    if kind not in MOLLIFIER_KINDS:
        raise ConfigError(f'unknown mollifier {kind!r}, expected one of {MOLLIFIER_KINDS}', field='mollifier')
    if not (eta > 0):
        raise ConfigError('eta must be positive', field='eta')
    return Mollifier(kind=kind, eta=float(eta), d=int(d), norm=normalization_constant(kind, int(d)))


@dataclass
class DensityField:
    """Значения ядерной оценки на сетке"""

    grid: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    eta: float
    n_samples: int
    t: Optional[float] = None
    x0: Optional[np.ndarray] = None
    cell_volume: Optional[float] = None
    mollifier: str = 'bump'
    pooled_all: bool = False
    lambda1_hat: Optional[float] = None
    mass_radius: Optional[float] = None
    ball_mass: Optional[float] = None

    def significant(self, level: float = 3.0) -> np.ndarray:
        return np.abs(self.values) > level * self.stderr

    def mass(self) -> float:
        if self.cell_volume is None:
            raise AnalysisError('grid cell volume unknown')
        return float(self.values.sum() * self.cell_volume)

    def total_mass(self) -> float:
        """Масса на широком шаре, если она считалась, иначе сумма по решётке"""
        return self.ball_mass if self.ball_mass is not None else self.mass()

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.grid, columns=[f'v_{i}' for i in range(1, self.grid.shape[1] + 1)])
        frame['value'] = self.values
        frame['stderr'] = self.stderr
        return frame

    def metadata(self) -> Dict[str, Any]:
        return {
            'eta': self.eta,
            'n': self.n_samples,
            't': self.t,
            'x0': None if self.x0 is None else [float(v) for v in self.x0],
            'mollifier': self.mollifier,
            'cell_volume': self.cell_volume,
            'pooled_all': self.pooled_all,
            'lambda1_hat': self.lambda1_hat,
            'mass_radius': self.mass_radius,
            'ball_mass': self.ball_mass,
        }


def estimate_density(samples, grid, mollifier: Mollifier, t=None, x0=None, cell_volume=None) -> DensityField:
    """values[g] = (1/n) sum_s phi_eta(samples[s] - grid[g]) и стандартные ошибки"""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    n = samples.shape[0]
    if n == 0 or samples.size == 0:
        raise AnalysisError('cannot estimate a density from an empty sample')
    if n < MIN_SAMPLES:
        logger.warning(f'Всего {n} выборочных точек, оценка плотности ненадёжна')
    values = np.empty(grid.shape[0])
    stderr = np.zeros(grid.shape[0])
    chunk = max(1, 2_000_000 // max(n, 1))
    for start in range(0, grid.shape[0], chunk):
        block = grid[start:start + chunk]
        kernel = mollifier(samples[None, :, :] - block[:, None, :])
        values[start:start + len(block)] = kernel.mean(axis=1)
        if n > 1:
            stderr[start:start + len(block)] = kernel.std(axis=1, ddof=1) / np.sqrt(n)
    return DensityField(grid=grid, values=values, stderr=stderr, eta=mollifier.eta, n_samples=n, t=t,
                        x0=None if x0 is None else np.asarray(x0, dtype=float), cell_volume=cell_volume,
                        mollifier=mollifier.kind)


def ball_mass(samples, mollifier: Mollifier, center, radius: float, points_per_eta: int = 4) -> float:
    """Масса оценки на шаре |x - center| <= radius.

    Сумма значений по решётке center + (eta / points_per_eta) Z^d, умноженная на объём ячейки.
    Каждая точка выборки даёт вклад только в узлы из носителя ядра.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    center = np.asarray(center, dtype=float)
    if not (radius > 0):
        raise ConfigError('mass radius must be positive', field='mass_radius')
    n, d = samples.shape
    if n == 0:
        raise AnalysisError('cannot estimate a density from an empty sample')
    step = mollifier.eta / points_per_eta
    reach = points_per_eta + 1
    offsets = np.stack(np.meshgrid(*[np.arange(-reach, reach + 1)] * d, indexing='ij'), axis=-1).reshape(-1, d)
    total = 0.0
    chunk = max(1, 2_000_000 // len(offsets))
    for start in range(0, n, chunk):
        block = samples[start:start + chunk]
        nodes = center + step * (np.round((block - center) / step)[:, None, :] + offsets[None, :, :])
        inside = np.linalg.norm(nodes - center, axis=-1) <= radius + 1e-12
        total += float(np.sum(mollifier(block[:, None, :] - nodes) * inside))
    return total * step ** d / n


def make_grid(center, half_width, spacing: float, radius: Optional[float] = None):
    """Равномерная решётка center +- half_width; при radius - только точки шара"""
    center = np.asarray(center, dtype=float)
    if not (spacing > 0):
        raise ConfigError('grid spacing must be positive', field='spacing')
    half = np.broadcast_to(np.asarray(half_width, dtype=float), center.shape)
    axes = []
    for c, w in zip(center, half):
        n = int(np.floor(w / spacing + 1e-9))
        axes.append(c + spacing * np.arange(-n, n + 1))
    mesh = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, center.size)
    if radius is not None:
        mesh = mesh[np.linalg.norm(mesh - center, axis=1) <= radius + 1e-12]
    return mesh, spacing ** center.size


def default_grid(samples, x0, spacing: float):
    """Решётка x0 +- 4 выборочных стандартных отклонения по каждой оси"""
    samples = np.asarray(samples, dtype=float)
    return make_grid(x0, 4.0 * samples.std(axis=0), spacing)


def default_bandwidth(samples, lambda1_hat: Optional[float] = None, delta: Optional[float] = None) -> float:
    """eta = min(sqrt(lambda_1 Delta), n^{-1/(d+4)} sigma^)"""
    samples = np.asarray(samples, dtype=float)
    n, d = samples.shape
    spread = float(samples.std(axis=0).mean())
    eta = n ** (-1.0 / (d + 4)) * spread
    if lambda1_hat is not None and delta is not None and lambda1_hat > 0:
        eta = min(eta, math.sqrt(lambda1_hat * delta))
    if not (eta > 0):
        raise AnalysisError('degenerate sample: bandwidth would be zero')
    return eta


def collect_tagged_positions(spec: ModelSpec, x0, steps: Sequence[int], replica: int, pool_all: bool):
    step = STEPPERS[spec.scheme]
    pop = init_population(spec, pin_tagged_at=x0, replica=replica)
    wanted = set(steps)
    out = {}
    for k in range(1, max(steps) + 1):
        pop = step(pop, spec)
        if k in wanted:
            out[k] = pop.X.copy() if pool_all else pop.tagged_position.copy()
    return [out[k] for k in steps]


def conditional_density_experiment(spec: ModelSpec, x0, times: Sequence[float], grid=None, replicas: int = 100,
                                   mollifier_kind: str = 'bump', eta: Optional[float] = None,
                                   pool_all: bool = False, workers: int = 1, spacing: float = 0.25,
                                   radius: Optional[float] = None, lambda1_hat: Optional[float] = None,
                                   mass_radius: Optional[float] = None) -> List[DensityField]:
    """Оценки f_{x0}(t, .) по независимым репликам с меченой частицей в x0.

    Без eta ширина ядра берётся из default_bandwidth; lambda1_hat - нижняя оценка
    спектра шума из анализа схемы, без неё она считается по M^ начальной популяции.
    При mass_radius масса оценки дополнительно считается на шаре этого радиуса.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (spec.d,) or not np.all(np.isfinite(x0)):
        raise ConfigError(f'x0 must be a finite {spec.d}-vector', field='x0')
    steps = []
    for t in times:
        k = int(round(t / spec.delta))
        if k < 1 or abs(k * spec.delta - t) > 1e-9 * max(t, 1.0):
            raise ConfigError(f'time {t} is not a positive multiple of delta={spec.delta}', field='times')
        steps.append(k)
    local = spec.replace(T=max(steps) * spec.delta)
    if pool_all:
        logger.warning('Режим pool-all-particles: частицы одной популяции коррелированы, оценка смещена')

    if workers == 1:
        collected = [collect_tagged_positions(local, x0, steps, r, pool_all) for r in range(replicas)]
    else:
        collected = Parallel(n_jobs=workers)(
            delayed(collect_tagged_positions)(local, x0, steps, r, pool_all) for r in range(replicas)
        )

    if eta is None and lambda1_hat is None:
        from .scheme_analysis import UNIT_H
        first = init_population(local, pin_tagged_at=x0, replica=0)
        Mhat, _ = pair_coefficients(first.X, UNIT_H, rows=[first.tagged])
        lambda1_hat = spec.h.m * float(np.linalg.eigvalsh(Mhat[0])[0])

    fields = []
    for idx, (t, k) in enumerate(zip(times, steps)):
        samples = np.vstack([np.atleast_2d(c[idx]) for c in collected])
        bandwidth = eta if eta is not None else default_bandwidth(samples, lambda1_hat, spec.delta)
        mollifier = make_mollifier(mollifier_kind, bandwidth, spec.d)
        if grid is None:
            if radius is not None:
                points, volume = make_grid(x0, radius, spacing, radius=radius)
            else:
                points, volume = default_grid(samples, x0, spacing)
        else:
            points, volume = np.asarray(grid, dtype=float), spacing ** spec.d
        field_t = estimate_density(samples, points, mollifier, t=float(t), x0=x0, cell_volume=volume)
        field_t.pooled_all = pool_all
        field_t.lambda1_hat = lambda1_hat
        if mass_radius is not None:
            field_t.mass_radius = float(mass_radius)
            field_t.ball_mass = ball_mass(samples, mollifier, x0, mass_radius)
        logger.info(f't={t}: n={field_t.n_samples}, eta={bandwidth:.4f}, масса={field_t.total_mass():.4f}')
        fields.append(field_t)
    return fields

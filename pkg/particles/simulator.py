"""Частичная схема Эйлера для нелинейного СДУ Ландау.

Закон вспомогательного процесса заменён эмпирической мерой P частиц.
Две схемы шага:

* pairwise-shared-noise - общий гауссов шум на каждую неупорядоченную пару,
  импульс сохраняется траекторно;
* meanfield-gaussian - для каждой частицы гауссов шаг с ковариацией
  Delta * (1/P) sum_j a(X_i - X_j), импульс сохраняется только в среднем.

Весь шум берётся из ключевых потоков (seed, назначение, индексы), поэтому
траектория бит-в-бит воспроизводима и не зависит от числа потоков.
"""

import logging
from pathlib import Path
from typing import Optional, List, Tuple, Dict, Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm
from django.conf import settings

from .exceptions import DegenerateInitialLawError, NumericalBlowupError, NonPSDCovarianceError, ConfigError
from .kernels import eval_a, eval_b, sigma_times, HFunction
from .models import ModelSpec, Population, RecordingPlan, Trajectory
from .rng import keyed_generator

logger = logging.getLogger(__name__)

H3_RELATIVE_TOLERANCE = 1e-6
PSD_RELATIVE_TOLERANCE = 1e-8
# строк на поток шума парной схемы; от ROW_CHUNK и числа процессов не зависит
NOISE_BLOCK = 64


def h3_matrix(X: np.ndarray) -> np.ndarray:
    """Эмпирическая матрица E[|X|^2 I - X X*]"""
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    energy = np.einsum('ni,ni->', X, X) / n
    return energy * np.eye(d) - X.T @ X / n


def h3_min_eigenvalue(X: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(h3_matrix(X))[0])


def check_h3(X: np.ndarray) -> float:
    """Проверяет, что носитель не лежит на прямой; возвращает lambda_min"""
    matrix = h3_matrix(X)
    w, V = np.linalg.eigh(matrix)
    tolerance = H3_RELATIVE_TOLERANCE * float(np.mean(np.einsum('ni,ni->n', X, X)))
    if w[0] <= tolerance:
        raise DegenerateInitialLawError(w[0], V[:, 0], tolerance)
    return float(w[0])


def init_population(spec: ModelSpec, pin_tagged_at=None, replica: int = 0) -> Population:
    """P независимых реализаций начального закона; частица 0 - меченая"""
    rng = keyed_generator(spec.seed, 'init', replica)
    X = spec.init.sample(spec.P, spec.d, rng)
    check_h3(X)
    if pin_tagged_at is not None:
        x0 = np.asarray(pin_tagged_at, dtype=float)
        if x0.shape != (spec.d,) or not np.all(np.isfinite(x0)):
            raise ConfigError(f'pinned point must be a finite {spec.d}-vector', field='x0')
        X[0] = x0
    return Population(t=0.0, X=X, tagged=0, seed=spec.seed, replica=replica, step_index=0)


def _row_blocks(rows, chunk=None):
    chunk = chunk or settings.ROW_CHUNK
    for start in range(0, len(rows), chunk):
        yield rows[start:start + chunk]


def pair_coefficients(X: np.ndarray, h: HFunction, rows=None) -> Tuple[np.ndarray, np.ndarray]:
    """A_i = (1/P) sum_j a(X_i - X_j), B_i = (1/P) sum_j b(X_i - X_j) для строк rows"""
    X = np.asarray(X, dtype=float)
    rows = np.arange(X.shape[0]) if rows is None else np.atleast_1d(rows)
    d = X.shape[1]
    A = np.empty((len(rows), d, d))
    B = np.empty((len(rows), d))
    offset = 0
    for block in _row_blocks(rows):
        z = X[block, None, :] - X[None, :, :]
        A[offset:offset + len(block)] = eval_a(z, h).mean(axis=1)
        B[offset:offset + len(block)] = eval_b(z, h).mean(axis=1)
        offset += len(block)
    return A, B


def psd_sqrt(matrices: np.ndarray, step_index=None, t=None) -> np.ndarray:
    """Симметричный PSD корень через спектральное разложение с обрезкой в 0"""
    matrices = np.asarray(matrices, dtype=float)
    w, V = np.linalg.eigh(matrices)
    trace = np.trace(matrices, axis1=-2, axis2=-1)
    threshold = -PSD_RELATIVE_TOLERANCE * np.maximum(trace, 0.0)
    bad = w[..., 0] < threshold
    if np.any(bad):
        worst = float(w[..., 0][bad].min())
        raise NonPSDCovarianceError(f'covariance eigenvalue {worst:.3e} below tolerance', step_index, t)
    w = np.clip(w, 0.0, None)
    return np.einsum('...ij,...j,...kj->...ik', V, np.sqrt(w), V)


def _pairwise_pass(X, h, seed, purpose, stream, dt, with_noise=True, track=None):
    """Снос и шум парной схемы за один проход по верхнему треугольнику пар.

    Пары (i, j), j > i, перебираются блоками по NOISE_BLOCK строк; шум блока
    берётся из потока (seed, purpose, *stream, номер блока) в порядке
    строк, затем столбцов. Вклад пары прибавляется к i и вычитается из j,
    так что сумма приращений равна нулю с точностью округления.
    """
    P, d = X.shape
    drift = np.zeros_like(X)
    noise = np.zeros_like(X)
    tracked = np.zeros_like(X) if track is not None else None
    scale = np.sqrt(dt)
    for block, lo in enumerate(range(0, P - 1, NOISE_BLOCK)):
        hi = min(lo + NOISE_BLOCK, P - 1)
        z = X[lo:hi, None, :] - X[None, lo + 1:, :]
        upper = np.arange(lo + 1, P)[None, :] > np.arange(lo, hi)[:, None]
        hz = np.where(upper, h(np.einsum('bjk,bjk->bj', z, z)), 0.0)
        b = -(d - 1) * hz[..., None] * z
        drift[lo:hi] += b.sum(axis=1)
        drift[lo + 1:] -= b.sum(axis=0)
        if not with_noise:
            continue
        dB = np.zeros_like(z)
        rng = keyed_generator(seed, purpose, *stream, block)
        dB[upper] = rng.standard_normal((int(upper.sum()), d)) * scale
        v = sigma_times(z, dB, hz)
        noise[lo:hi] += v.sum(axis=1)
        noise[lo + 1:] -= v.sum(axis=0)
        if track is not None:
            if lo <= track < hi:
                tracked[track + 1:] = dB[track - lo, track - lo:]
            if track > lo:
                stop = min(hi, track)
                tracked[lo:stop] = dB[:stop - lo, track - lo - 1]
    return drift / P, noise / np.sqrt(P), tracked


def _finite_or_raise(X, step_index, t):
    if not np.all(np.isfinite(X)):
        raise NumericalBlowupError('numerical blowup: non-finite particle velocity', step_index, t)


def step_pairwise(pop: Population, spec: ModelSpec, suppress_noise: bool = False) -> Population:
    """Шаг парной схемы с общим шумом на пару"""
    if spec.scheme != 'pairwise-shared-noise':
        raise ConfigError('step_pairwise requires the pairwise-shared-noise scheme', field='scheme')
    X_new, _ = pairwise_increment(pop, spec, spec.delta, 'pair-noise', (pop.replica, pop.step_index),
                                  suppress_noise=suppress_noise)
    return pop.advanced(X_new, spec.delta)


def pairwise_increment(pop: Population, spec: ModelSpec, dt: float, purpose: str, stream,
                       suppress_noise: bool = False, track: Optional[int] = None):
    """Новое состояние после парного шага длины dt и парные приращения для track"""
    if pop.P < 2:
        raise ConfigError('P must be >= 2', field='P')
    X = pop.X
    drift, noise, tracked = _pairwise_pass(X, spec.h, spec.seed, purpose, stream, dt,
                                           with_noise=not suppress_noise, track=track)
    X_new = X + dt * drift + noise
    _finite_or_raise(X_new, pop.step_index + 1, pop.t + dt)
    return X_new, tracked


def step_meanfield_gaussian(pop: Population, spec: ModelSpec, suppress_noise: bool = False) -> Population:
    """Шаг с прямой выборкой гауссова приращения J_k для каждой частицы"""
    if spec.scheme != 'meanfield-gaussian':
        raise ConfigError('step_meanfield_gaussian requires the meanfield-gaussian scheme', field='scheme')
    X_new, _ = meanfield_increment(pop, spec, spec.delta, 'meanfield-noise', (pop.replica, pop.step_index),
                                   suppress_noise=suppress_noise)
    return pop.advanced(X_new, spec.delta)


def meanfield_increment(pop: Population, spec: ModelSpec, dt: float, purpose: str, stream,
                        suppress_noise: bool = False):
    """Новое состояние после шага dt и стандартные нормали xi, которыми он сделан"""
    if pop.P < 2:
        raise ConfigError('P must be >= 2', field='P')
    X = pop.X
    A, B = pair_coefficients(X, spec.h)
    X_new = X + dt * B
    xi = np.zeros_like(X)
    if not suppress_noise:
        S = psd_sqrt(dt * A, pop.step_index + 1, pop.t + dt)
        xi = keyed_generator(spec.seed, purpose, *stream).standard_normal(X.shape)
        X_new = X_new + np.einsum('pij,pj->pi', S, xi)
    _finite_or_raise(X_new, pop.step_index + 1, pop.t + dt)
    return X_new, xi


STEPPERS = {
    'pairwise-shared-noise': step_pairwise,
    'meanfield-gaussian': step_meanfield_gaussian,
}


def moment_row(pop: Population) -> Dict[str, float]:
    """Строка временного ряда моментов"""
    X = pop.X
    row = {'t': pop.t, 'step': pop.step_index}
    mean = X.mean(axis=0)
    for i, value in enumerate(mean, start=1):
        row[f'mean_{i}'] = float(value)
    row['energy'] = float(np.einsum('ni,ni->', X, X) / pop.P)
    row['min_eig_empirical'] = h3_min_eigenvalue(X)
    return row


def run(spec: ModelSpec, record: Optional[RecordingPlan] = None, pin_tagged_at=None, replica: int = 0,
        suppress_noise: bool = False, progress: bool = False) -> Trajectory:
    """Прогон N_steps шагов с записью по плану"""
    record = record or RecordingPlan()
    step = STEPPERS[spec.scheme]
    pop = init_population(spec, pin_tagged_at, replica)
    trajectory = Trajectory(spec=spec, plan=record, replica=replica)
    n_steps = spec.n_steps
    _record(trajectory, pop, record, 0, n_steps)

    for k in tqdm(range(1, n_steps + 1), disable=not progress, desc=f'replica {replica}', leave=False):
        if record.tagged_coefficients:
            A, B = pair_coefficients(pop.X, spec.h, rows=[pop.tagged])
            trajectory.tagged_A.append(A[0])
            trajectory.tagged_B.append(B[0])
        try:
            pop = step(pop, spec, suppress_noise=suppress_noise)
        except NumericalBlowupError as e:
            logger.error(f'Реплика {replica}: разрушение схемы: {e}')
            raise
        _record(trajectory, pop, record, k, n_steps)
    return trajectory


def _record(trajectory: Trajectory, pop: Population, plan: RecordingPlan, k: int, n_steps: int):
    if plan.tagged_path:
        trajectory.tagged_path.append(pop.tagged_position.copy())
        trajectory.times.append(pop.t)
    if plan.records_step(k, n_steps):
        # начальный и конечный снимки хранятся всегда
        if plan.keep_populations or k in (0, n_steps):
            trajectory.populations.append(pop)
        if plan.moments:
            trajectory.moments.append(moment_row(pop))


def run_replicas(spec: ModelSpec, record: Optional[RecordingPlan], replicas: int, workers: int = 1,
                 pin_tagged_at=None, suppress_noise: bool = False, first_replica: int = 0) -> List[Trajectory]:
    """Независимые реплики; порядок результата не зависит от числа воркеров"""
    indices = range(first_replica, first_replica + replicas)
    if workers == 1:
        return [run(spec, record, pin_tagged_at, r, suppress_noise) for r in tqdm(indices, desc='replicas', leave=False)]
    return Parallel(n_jobs=workers)(
        delayed(run)(spec, record, pin_tagged_at, r, suppress_noise) for r in indices
    )


def write_snapshot(path, pop: Population, spec: ModelSpec) -> Path:
    """CSV снимка: заголовок с метаданными, затем P строк по d координат"""
    path = Path(path)
    header = {
        'd': spec.d,
        'P': pop.P,
        't': repr(float(pop.t)),
        'step_index': pop.step_index,
        'seed': spec.seed,
        'replica': pop.replica,
        'spec_hash': spec.content_hash(),
    }
    with open(path, 'w', encoding='utf-8', newline='') as f:
        for key, value in header.items():
            f.write(f'# {key}={value}\n')
        frame = pd.DataFrame(pop.X, columns=[f'v_{i}' for i in range(1, spec.d + 1)])
        frame.to_csv(f, index=False, float_format='%.17g')
    return path


def read_snapshot(path) -> Tuple[Dict[str, Any], np.ndarray]:
    """Обратное чтение снимка"""
    meta = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if not line.startswith('#'):
                break
            key, _, value = line[1:].strip().partition('=')
            meta[key] = value
    frame = pd.read_csv(path, comment='#')
    for key in ('d', 'P', 'step_index', 'seed', 'replica'):
        meta[key] = int(meta[key])
    meta['t'] = float(meta['t'])
    return meta, frame.to_numpy(dtype=float)

"""Огибающие плотности и хвостов, подбор констант и проверка на отложенной половине данных.

Константы c1, c2, c3 неконструктивны, поэтому проверяется форма:
константы подбираются на одной половине точек, проверка идёт на другой.
"""

import logging
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Sequence, Dict, Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats

from .analysis_utils import weighted_least_squares
from .density_estimation import DensityField, estimate_density, make_grid, make_mollifier, collect_tagged_positions
from .exceptions import AnalysisError, ConfigError
from .kernels import sigma_lipschitz_constant
from .models import ModelSpec, Trajectory
from .rng import keyed_generator

logger = logging.getLogger(__name__)

MIN_SIGNIFICANT_POINTS = 30

QV_MESH_WARNING = 1e-2


@dataclass
class EnvelopeParams:
    """Константы нижней (c1_low, c2_low) и верхней (c1_up, c2_up, c3_up) огибающих"""

    c1_low: float = 1.0
    c2_low: float = 1.0
    c1_up: float = 0.0
    c2_up: float = 1.0
    c3_up: float = 1.0
    lambda1_hat: Optional[float] = None
    lambda2_hat: Optional[float] = None
    fit_window: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name in ('c1_low', 'c2_low', 'c2_up', 'c3_up'):
            if not (getattr(self, name) > 0):
                raise ConfigError(f'{name} must be positive', field=name)
        if self.c1_up < 0:
            raise ConfigError('c1_up must be non-negative', field='c1_up')

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise AnalysisError('envelopes are defined for t > 0 only')
    return t


def _sq(v):
    v = np.asarray(v, dtype=float)
    return np.einsum('...i,...i->...', v, v)


def lower_envelope(t, v, x0, params: EnvelopeParams):
    """c1 t^{-d/2} exp(-c2 |v - x0|^2 / t)"""
    t = _check_time(t)
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    dist = _sq(v - np.asarray(x0, dtype=float))
    return params.c1_low * t ** (-d / 2.0) * np.exp(-params.c2_low * dist / t)


def log_excess(v, x0):
    """ln(1 + |v|^2) - ln(1 + |x0|^2)"""
    return np.log1p(_sq(v)) - np.log1p(_sq(x0))


def upper_envelope(t, v, x0, params: EnvelopeParams):
    """c3 t^{-d/2} exp(-(ln(1+|v|^2) - ln(1+|x0|^2) - c1 t)^2 / (c2 t))"""
    t = _check_time(t)
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    excess = log_excess(v, x0) - params.c1_up * t
    return params.c3_up * t ** (-d / 2.0) * np.exp(-excess ** 2 / (params.c2_up * t))


def tail_bound(t, r, x0, c1: float, c2: float):
    """exp(-(ln(1+r^2) - ln(1+|x0|^2) - c1 t)^2 / (c2 t)); 1 в вакуумной области"""
    if t < 0:
        raise AnalysisError('tail bound needs t >= 0')
    r = np.asarray(r, dtype=float)
    excess = np.log1p(r ** 2) - np.log1p(_sq(x0)) - c1 * t
    if t == 0:
        # X_0 = x0 детерминирован
        return np.where(excess > 0, 0.0, 1.0)
    bound = np.where(excess > 0, np.exp(-np.maximum(excess, 0.0) ** 2 / (c2 * t)), 1.0)
    return np.clip(bound, 0.0, 1.0)


def split_mask(density: DensityField) -> np.ndarray:
    """True - точка подбора, False - проверочная; шахматное разбиение решётки"""
    n = density.grid.shape[0]
    if density.cell_volume is None or density.x0 is None:
        return np.arange(n) % 2 == 0
    spacing = density.cell_volume ** (1.0 / density.grid.shape[1])
    index = np.rint((density.grid - density.x0) / spacing).astype(int).sum(axis=1)
    return index % 2 == 0


def _points_frame(fields: Sequence[DensityField], significance: float) -> pd.DataFrame:
    frames = []
    for density in fields:
        if density.t is None or density.x0 is None:
            raise AnalysisError('density field must carry t and x0')
        frame = density.to_frame()
        frame.insert(0, 't', density.t)
        frame['fit'] = split_mask(density)
        frame['significant'] = density.values > significance * density.stderr
        frame['dist2'] = _sq(density.grid - density.x0)
        frame['excess'] = log_excess(density.grid, density.x0)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def _log_targets(points: pd.DataFrame, d: int):
    value = points['value'].to_numpy()
    se = points['stderr'].to_numpy()
    t = points['t'].to_numpy()
    target = np.log(value) + 0.5 * d * np.log(t)
    # дисперсия log f по дельта-методу
    weights = (value / np.maximum(se, 1e-300)) ** 2
    return target, weights, t


def fit_envelopes(points: pd.DataFrame, d: int, significance: float = 3.0,
                  c1_grid: Optional[Sequence[float]] = None, lambda1_hat: Optional[float] = None,
                  lambda2_hat: Optional[float] = None) -> EnvelopeParams:
    """МНК в логарифмах по значимым точкам подбора, затем сдвиг констант до доминирования.

    lambda1_hat и lambda2_hat - оценки границ спектра шума, при которых подобраны константы;
    они сохраняются в параметрах вместе с окном подбора.
    """
    fit = points[points['fit'] & points['significant']]
    if len(fit) < 3:
        raise AnalysisError(f'only {len(fit)} significant fit points')
    target, weights, t = _log_targets(fit, d)
    value = fit['value'].to_numpy()
    se = fit['stderr'].to_numpy()

    design = np.column_stack([np.ones_like(t), -fit['dist2'].to_numpy() / t])
    _, c2_low = weighted_least_squares(design, target, weights)
    c2_low = max(float(c2_low), 1e-6)
    floor = value - significance * se
    usable = floor > 0
    if not np.any(usable):
        raise AnalysisError('no fit point is significant enough to anchor the lower envelope')
    ratio = floor[usable] * t[usable] ** (d / 2.0) * np.exp(c2_low * fit['dist2'].to_numpy()[usable] / t[usable])
    c1_low = float(ratio.min())

    excess = fit['excess'].to_numpy()
    c1_grid = np.linspace(0.0, 5.0, 51) if c1_grid is None else np.asarray(c1_grid, dtype=float)
    best = None
    for c1 in c1_grid:
        design = np.column_stack([np.ones_like(t), -(excess - c1 * t) ** 2 / t])
        coef = weighted_least_squares(design, target, weights)
        inv_c2 = max(float(coef[1]), 1e-6)
        resid = target - coef[0] + inv_c2 * (excess - c1 * t) ** 2 / t
        loss = float(np.sum(weights * resid ** 2))
        if best is None or loss < best[0]:
            best = (loss, float(c1), 1.0 / inv_c2)
    _, c1_up, c2_up = best
    ceiling = value + significance * se
    c3_up = float(np.max(ceiling * t ** (d / 2.0) * np.exp((excess - c1_up * t) ** 2 / (c2_up * t))))

    return EnvelopeParams(
        c1_low=c1_low, c2_low=c2_low, c1_up=c1_up, c2_up=c2_up, c3_up=c3_up,
        lambda1_hat=lambda1_hat, lambda2_hat=lambda2_hat,
        fit_window={'times': sorted({float(x) for x in fit['t']}), 'n_points': int(len(fit))},
    )


@dataclass
class SandwichReport:
    """Итог проверки lower <= KDE <= upper на проверочной половине"""

    status: str
    params: Optional[EnvelopeParams]
    n_fit: int
    n_test: int
    lower_violations: int = 0
    upper_violations: int = 0
    violation_fraction: float = 0.0
    positivity: bool = True
    points: pd.DataFrame = field(default_factory=pd.DataFrame, repr=False)
    reason: str = ''

    def to_dict(self) -> Dict[str, Any]:
        return {
            'status': self.status,
            'params': None if self.params is None else self.params.to_dict(),
            'n_fit': self.n_fit,
            'n_test': self.n_test,
            'lower_violations': self.lower_violations,
            'upper_violations': self.upper_violations,
            'violation_fraction': self.violation_fraction,
            'positivity': self.positivity,
            'reason': self.reason,
        }


def verify_sandwich(fields: Sequence[DensityField], params: Optional[EnvelopeParams] = None,
                    significance: float = 3.0, max_violation_fraction: float = 0.01,
                    min_points: int = MIN_SIGNIFICANT_POINTS, lambda1_hat: Optional[float] = None,
                    lambda2_hat: Optional[float] = None) -> SandwichReport:
    """Подбор огибающих на точках подбора и проверка сэндвича и положительности на проверочных"""
    if not fields:
        return SandwichReport('inconclusive', params, 0, 0, reason='no density fields')
    if lambda1_hat is None:
        lambda1_hat = fields[0].lambda1_hat
    d = fields[0].grid.shape[1]
    points = _points_frame(fields, significance)
    nonzero = np.abs(points['value']) > significance * points['stderr']
    positivity = bool(np.all(points.loc[nonzero, 'value'] > 0))

    n_fit = int((points['fit'] & points['significant']).sum())
    test = points[~points['fit'] & points['significant']]
    n_test = int(len(test))
    if n_test == 0 or n_test < min_points or (params is None and n_fit < min_points):
        logger.warning(f'Значимых точек мало (подбор {n_fit}, проверка {n_test}), вывод не делается')
        return SandwichReport('inconclusive', params, n_fit, n_test, positivity=positivity, points=points,
                              reason=f'fewer than {min_points} significant points')
    if params is None:
        params = fit_envelopes(points, d, significance, lambda1_hat=lambda1_hat, lambda2_hat=lambda2_hat)

    grid = points[[f'v_{i}' for i in range(1, d + 1)]].to_numpy()
    x0 = np.vstack([np.broadcast_to(f.x0, f.grid.shape) for f in fields])
    t = points['t'].to_numpy()
    points['lower'] = lower_envelope(t, grid, x0, params)
    points['upper'] = upper_envelope(t, grid, x0, params)
    value, se = points['value'], points['stderr']
    points['lower_violation'] = value + significance * se < points['lower']
    points['upper_violation'] = value - significance * se > points['upper']

    test = points[~points['fit'] & points['significant']]
    lower_bad = int(test['lower_violation'].sum())
    upper_bad = int(test['upper_violation'].sum())
    fraction = (lower_bad + upper_bad) / n_test
    passed = fraction <= max_violation_fraction and positivity
    logger.info(f'Сэндвич: {lower_bad} нижних и {upper_bad} верхних нарушений из {n_test} точек')
    return SandwichReport(
        status='pass' if passed else 'fail',
        params=params,
        n_fit=n_fit,
        n_test=n_test,
        lower_violations=lower_bad,
        upper_violations=upper_bad,
        violation_fraction=fraction,
        positivity=positivity,
        points=points,
    )


def gaussian_oracle_fields(x0, times: Sequence[float], n: int = 20000, radius: float = 3.0, spacing: float = 0.25,
                           mollifier_kind: str = 'bump', eta: float = 0.2, variance_rate: float = 1.0,
                           seed: int = 0) -> List[DensityField]:
    """Поля KDE по точной выборке N(x0, 2 rate t I): эталон, где истинная плотность известна"""
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    mollifier = make_mollifier(mollifier_kind, eta, d)
    grid, volume = make_grid(x0, radius, spacing, radius=radius)
    fields = []
    for idx, t in enumerate(times):
        rng = keyed_generator(seed, 'gaussian-oracle', idx)
        samples = x0 + np.sqrt(2.0 * variance_rate * t) * rng.standard_normal((n, d))
        fields.append(estimate_density(samples, grid, mollifier, t=float(t), x0=x0, cell_volume=volume))
    return fields


@dataclass
class TailReport:
    """Эмпирический хвост P(|X_t| >= r) против экспоненциальной границы"""

    t: float
    x0: List[float]
    radii: np.ndarray
    empirical_tail: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    fit: np.ndarray
    c1: float
    c2: float
    violations: int
    n_test: int
    status: str

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'r': self.radii,
            'empirical_tail': self.empirical_tail,
            'stderr': self.stderr,
            'bound': self.bound,
            'split': np.where(self.fit, 'fit', 'test'),
        })

    def to_dict(self) -> Dict[str, Any]:
        return {
            't': self.t,
            'x0': self.x0,
            'c1': self.c1,
            'c2': self.c2,
            'violations': self.violations,
            'n_test': self.n_test,
            'status': self.status,
        }


def empirical_tail(samples, radii):
    """P^(|X| >= r) и его стандартная ошибка"""
    norms = np.linalg.norm(np.atleast_2d(np.asarray(samples, dtype=float)), axis=1)
    if norms.size == 0:
        raise AnalysisError('cannot estimate a tail from an empty sample')
    radii = np.asarray(radii, dtype=float)
    p = (norms[None, :] >= radii[:, None]).mean(axis=1)
    return p, np.sqrt(p * (1.0 - p) / norms.size)


def tail_radii(samples, quantile_low: float = 0.5, quantile_high: float = 0.999, n_radii: int = 24):
    norms = np.linalg.norm(np.asarray(samples, dtype=float), axis=1)
    return np.quantile(norms, np.linspace(quantile_low, quantile_high, n_radii))


def fit_tail_constants(t: float, radii, p, x0):
    """sqrt(-ln p) линейна по L = ln(1+r^2) - ln(1+|x0|^2); затем c2 растягивается до доминирования"""
    radii = np.asarray(radii, dtype=float)
    p = np.asarray(p, dtype=float)
    excess = np.log1p(radii ** 2) - np.log1p(_sq(x0))
    usable = (p > 0) & (p < 1) & (excess > 0)
    if usable.sum() < 2:
        raise AnalysisError('fewer than 2 usable radii for the tail fit')
    s = np.sqrt(-np.log(p[usable]))
    L = excess[usable]
    fit = stats.linregress(L, s)
    slope = float(fit.slope)
    if slope > 0 and fit.intercept < 0:
        c1 = float(-fit.intercept / (slope * t))
    else:
        c1 = 0.0
        slope = float(np.sum(L * s) / np.sum(L * L))
    c2 = 1.0 / (max(slope, 1e-12) ** 2 * t)
    shifted = L - c1 * t
    active = shifted > 0
    if np.any(active):
        needed = shifted[active] ** 2 / (-np.log(p[usable][active]) * t)
        c2 = max(c2, float(needed.max()))
    return c1, c2


def verify_tail(samples, t: float, x0, quantile_low: float = 0.5, quantile_high: float = 0.999, n_radii: int = 24,
                significance: float = 3.0, max_violation_fraction: float = 0.01) -> TailReport:
    """Константы по чётным радиусам, проверка по нечётным"""
    radii = tail_radii(samples, quantile_low, quantile_high, n_radii)
    p, se = empirical_tail(samples, radii)
    fit = np.arange(len(radii)) % 2 == 0
    c1, c2 = fit_tail_constants(t, radii[fit], p[fit], x0)
    bound = tail_bound(t, radii, x0, c1, c2)
    test = ~fit & (bound < 1.0)
    violations = int(np.sum(test & (p - significance * se > bound)))
    n_test = int(test.sum())
    if n_test == 0:
        status = 'inconclusive'
    else:
        status = 'pass' if violations <= max_violation_fraction * n_test else 'fail'
    logger.info(f'Хвост при t={t}: c1={c1:.4f}, c2={c2:.4f}, нарушений {violations} из {n_test}')
    return TailReport(t=float(t), x0=[float(v) for v in np.asarray(x0)], radii=radii, empirical_tail=p,
                      stderr=se, bound=bound, fit=fit, c1=c1, c2=c2, violations=violations, n_test=n_test,
                      status=status)


def tail_experiment(spec: ModelSpec, x0, t: float, replicas: int, workers: int = 1, **kwargs) -> TailReport:
    """Положения меченой частицы в момент t по независимым репликам и проверка хвоста"""
    k = int(round(t / spec.delta))
    if k < 1 or abs(k * spec.delta - t) > 1e-9 * max(t, 1.0):
        raise ConfigError(f'tail time {t} is not a positive multiple of delta={spec.delta}', field='tail_time')
    local = spec.replace(T=k * spec.delta)
    x0 = np.asarray(x0, dtype=float)
    if workers == 1:
        collected = [collect_tagged_positions(local, x0, [k], r, False) for r in range(replicas)]
    else:
        collected = Parallel(n_jobs=workers)(
            delayed(collect_tagged_positions)(local, x0, [k], r, False) for r in range(replicas)
        )
    samples = np.vstack([c[0] for c in collected])
    return verify_tail(samples, t, x0, **kwargs)


@dataclass
class LogMartingaleReport:
    """Разложение Ито для Z_t = ln(1 + |X_t|^2) меченой частицы"""

    c: float
    qv_slope: float
    qv_final: float
    compensator_final: float
    max_qv_rate: float
    max_compensator_rate: float
    max_drift_terms: Dict[str, float]
    mesh: float
    passed: bool
    frame: pd.DataFrame = field(default_factory=pd.DataFrame, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'c': self.c,
            'qv_slope': self.qv_slope,
            'qv_final': self.qv_final,
            'compensator_final': self.compensator_final,
            'max_qv_rate': self.max_qv_rate,
            'max_compensator_rate': self.max_compensator_rate,
            'max_drift_terms': self.max_drift_terms,
            'mesh': self.mesh,
            'passed': self.passed,
        }


def qv_constant(h, d: int, energy: float) -> float:
    """c = 4 C_sigma^2 d (1 + E|X|^2)"""
    return 4.0 * sigma_lipschitz_constant(h) ** 2 * d * (1.0 + energy)


def verify_logmartingale(trajectory: Trajectory, c: Optional[float] = None) -> LogMartingaleReport:
    """Реконструкция M_t и проверка <M>_t <= c t по пути и коэффициентам меченой частицы.

    Проверка проходит, если и наклон реализованной вариации, и max_t <M>_t / t для
    компенсатора 4 x*Ax / (1 + |x|^2)^2 не превышают c.
    """
    X = trajectory.tagged_array()
    times = trajectory.time_grid()
    if len(trajectory.tagged_A) == 0 or len(trajectory.tagged_A) != len(X) - 1:
        raise AnalysisError('trajectory lacks per-step tagged coefficients; record with tagged_coefficients=True')
    spec = trajectory.spec
    if spec.delta > QV_MESH_WARNING:
        logger.warning(f'Шаг {spec.delta} крупнее {QV_MESH_WARNING}: оценка квадратичной вариации ненадёжна')
    A = np.asarray(trajectory.tagged_A, dtype=float)
    B = np.asarray(trajectory.tagged_B, dtype=float)
    x = X[:-1]
    q = 1.0 + _sq(x)
    xAx = np.einsum('ki,kij,kj->k', x, A, x)
    I1 = 2.0 * np.einsum('ki,ki->k', x, B) / q
    I2 = np.trace(A, axis1=1, axis2=2) / q
    I3 = -2.0 * xAx / q ** 2
    dt = np.diff(times)
    Z = np.log1p(_sq(X))
    dM = np.diff(Z) - (I1 + I2 + I3) * dt
    qv = np.concatenate([[0.0], np.cumsum(dM ** 2)])
    compensator = np.concatenate([[0.0], np.cumsum(4.0 * xAx / q ** 2 * dt)])

    if c is None:
        if trajectory.moments:
            energy = max(row['energy'] for row in trajectory.moments)
        else:
            energy = float(np.mean(_sq(X)))
        c = qv_constant(spec.h, spec.d, energy)

    if len(times) >= 3 and np.ptp(qv) > 0:
        slope = float(stats.linregress(times, qv).slope)
    else:
        slope = 0.0
    elapsed = times - times[0]
    rate = np.divide(qv[1:], elapsed[1:], out=np.zeros(len(qv) - 1), where=elapsed[1:] > 0)
    max_rate = float(rate.max()) if rate.size else 0.0
    compensator_rate = np.divide(compensator[1:], elapsed[1:], out=np.zeros(len(qv) - 1), where=elapsed[1:] > 0)
    max_compensator_rate = float(compensator_rate.max()) if compensator_rate.size else 0.0
    passed = slope <= c and max_compensator_rate <= c
    logger.info(f'<M>: наклон {slope:.4f}, max <M>_t/t {max_compensator_rate:.4f} при c={c:.4f}')
    frame = pd.DataFrame({
        't': times,
        'Z': Z,
        'qv_realized': qv,
        'qv_compensator': compensator,
        'I1': np.concatenate([I1, [np.nan]]),
        'I2': np.concatenate([I2, [np.nan]]),
        'I3': np.concatenate([I3, [np.nan]]),
    })
    return LogMartingaleReport(
        c=float(c),
        qv_slope=slope,
        qv_final=float(qv[-1]),
        compensator_final=float(compensator[-1]),
        max_qv_rate=max_rate,
        max_compensator_rate=max_compensator_rate,
        max_drift_terms={
            'I1': float(np.abs(I1).max()) if I1.size else 0.0,
            'I2': float(np.abs(I2).max()) if I2.size else 0.0,
            'I3': float(np.abs(I3).max()) if I3.size else 0.0,
        },
        mesh=float(spec.delta),
        passed=bool(passed),
        frame=frame,
    )

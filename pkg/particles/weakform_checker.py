"""Слабая форма уравнения Ландау на траекториях частиц.

d/dt <phi, P_t> = (1/P^2) sum_{p,q} [1/2 a_ij(X_p - X_q) d_ij phi(X_p) + b_i(X_p - X_q) d_i phi(X_p)]
"""

import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from django.conf import settings
from scipy import stats

from .exceptions import AnalysisError, ConfigError
from .kernels import eval_a, eval_b, HFunction
from .models import Population, Trajectory
from .rng import keyed_generator
from .simulator import pair_coefficients

logger = logging.getLogger(__name__)

MAX_DEGREE = 4
FULL_SUM_LIMIT = 4096
PARTNER_SAMPLE = 512

Monomial = Tuple[int, ...]


def _monomial(X: np.ndarray, exps: Monomial) -> np.ndarray:
    out = np.ones(X.shape[0])
    for k, e in enumerate(exps):
        if e:
            out = out * X[:, k] ** e
    return out


def _lower(exps: Monomial, k: int):
    """d/dv_k монома: (множитель, новый показатель)"""
    e = exps[k]
    if e == 0:
        return 0, exps
    return e, exps[:k] + (e - 1,) + exps[k + 1:]


@dataclass(frozen=True)
class TestFunction:
    """Многочлен степени <= 4 с явными градиентом и гессианом"""

    __test__ = False

    name: str
    d: int
    terms: Dict[Monomial, float] = field(default_factory=dict)

    def __post_init__(self):
        for exps in self.terms:
            if len(exps) != self.d or min(exps) < 0:
                raise ConfigError(f'bad monomial {exps} for d={self.d}', field='phi')
            if sum(exps) > MAX_DEGREE:
                raise ConfigError(f'test function degree above {MAX_DEGREE}', field='phi')

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self.terms), default=0)

    def value(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros(X.shape[0])
        for exps, c in self.terms.items():
            out += c * _monomial(X, exps)
        return out

    def gradient(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros_like(X)
        for exps, c in self.terms.items():
            for k in range(self.d):
                f, lowered = _lower(exps, k)
                if f:
                    out[:, k] += c * f * _monomial(X, lowered)
        return out

    def hessian(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros((X.shape[0], self.d, self.d))
        for exps, c in self.terms.items():
            for k in range(self.d):
                fk, once = _lower(exps, k)
                if not fk:
                    continue
                for l in range(self.d):
                    fl, twice = _lower(once, l)
                    if fl:
                        out[:, k, l] += c * fk * fl * _monomial(X, twice)
        return out

    @classmethod
    def coordinate(cls, i: int, d: int) -> 'TestFunction':
        exps = tuple(1 if k == i else 0 for k in range(d))
        return cls(f'v{i + 1}', d, {exps: 1.0})

    @classmethod
    def energy(cls, d: int) -> 'TestFunction':
        return cls('energy', d, {tuple(2 if k == i else 0 for k in range(d)): 1.0 for i in range(d)})

    @classmethod
    def quadratic(cls, i: int, j: int, d: int) -> 'TestFunction':
        exps = [0] * d
        exps[i] += 1
        exps[j] += 1
        name = f'v{i + 1}^2' if i == j else f'v{i + 1}v{j + 1}'
        return cls(name, d, {tuple(exps): 1.0})

    @classmethod
    def quadratic_form(cls, S, name: str = 'quadratic-form') -> 'TestFunction':
        """v* S v для симметричной S"""
        S = np.asarray(S, dtype=float)
        d = S.shape[0]
        terms = {}
        for i in range(d):
            for j in range(d):
                exps = [0] * d
                exps[i] += 1
                exps[j] += 1
                key = tuple(exps)
                terms[key] = terms.get(key, 0.0) + float(S[i, j])
        return cls(name, d, terms)

    @classmethod
    def polynomial(cls, terms: Dict[Monomial, float], d: int, name: str = 'polynomial') -> 'TestFunction':
        return cls(name, d, {tuple(int(e) for e in k): float(v) for k, v in terms.items()})

    @classmethod
    def from_name(cls, name: str, d: int) -> 'TestFunction':
        """energy, v<i>, v<i>^2, v<i>v<j>"""
        if name == 'energy':
            return cls.energy(d)
        match = re.fullmatch(r'v(\d)(?:v(\d)|\^2)?', name)
        if not match:
            raise ConfigError(f'unknown test function {name!r}', field='moments.functions')
        i = int(match.group(1)) - 1
        j = match.group(2)
        if not (0 <= i < d) or (j is not None and not (1 <= int(j) <= d)):
            raise ConfigError(f'test function {name!r} refers to a coordinate outside d={d}', field='moments.functions')
        if name.endswith('^2'):
            return cls.quadratic(i, i, d)
        if j is None:
            return cls.coordinate(i, d)
        return cls.quadratic(i, int(j) - 1, d)


def _partners(P: int, seed: int, purpose: str):
    """Стратифицированная подвыборка партнёров: по одному случайному индексу на страту"""
    edges = np.linspace(0, P, PARTNER_SAMPLE + 1).astype(int)
    rng = keyed_generator(seed, purpose, P)
    return np.array([rng.integers(lo, hi) for lo, hi in zip(edges[:-1], edges[1:])])


def _subsampled_coefficients(X, h, partners):
    A = np.empty((X.shape[0], X.shape[1], X.shape[1]))
    B = np.empty_like(X)
    Y = X[partners]
    chunk = settings.ROW_CHUNK
    for start in range(0, X.shape[0], chunk):
        z = X[start:start + chunk, None, :] - Y[None, :, :]
        A[start:start + chunk] = eval_a(z, h).mean(axis=1)
        B[start:start + chunk] = eval_b(z, h).mean(axis=1)
    return A, B


def weakform_terms(X, phi: TestFunction, h: HFunction, seed: int = 0) -> np.ndarray:
    """Вклад каждой частицы p в двойную сумму (усреднённый по партнёрам q)"""
    X = np.asarray(X, dtype=float)
    P = X.shape[0]
    if P < 2:
        raise ConfigError('P must be >= 2', field='P')
    if phi.d != X.shape[1]:
        raise ConfigError(f'test function lives in R^{phi.d}, population in R^{X.shape[1]}', field='phi')
    if P > FULL_SUM_LIMIT:
        partners = _partners(P, seed, 'weakform-partners')
        A, B = _subsampled_coefficients(X, h, partners)
    else:
        A, B = pair_coefficients(X, h)
    H = phi.hessian(X) if phi.degree >= 2 else np.zeros_like(A)
    G = phi.gradient(X)
    return 0.5 * np.einsum('pij,pij->p', A, H) + np.einsum('pi,pi->p', B, G)


def weakform_rhs(pop: Union[Population, np.ndarray], phi: TestFunction, h: HFunction, seed: int = 0) -> float:
    """Правая часть слабой формы на эмпирической мере популяции"""
    X = pop.X if isinstance(pop, Population) else np.asarray(pop, dtype=float)
    terms = weakform_terms(X, phi, h, seed)
    if X.shape[0] > FULL_SUM_LIMIT:
        logger.info(f'P={X.shape[0]}: двойная сумма по {PARTNER_SAMPLE} партнёрам, '
                    f'SE подвыборки {terms.std(ddof=1) / np.sqrt(len(terms)):.3e}')
    # фиксированный порядок суммирования
    return float(np.sum(terms) / len(terms))


def _snapshots(trajectory: Trajectory, window) -> List[Population]:
    lo, hi = window
    return [p for p in trajectory.populations if lo - 1e-12 <= p.t <= hi + 1e-12]


def moment_balance_check(trajectories: Sequence[Trajectory], phi: TestFunction, h: HFunction,
                         window=(0.0, 1.0)) -> pd.DataFrame:
    """Центральная разность <phi, P_t> против правой части слабой формы, по репликам"""
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    if not trajectories:
        raise AnalysisError('no trajectories to check')
    per_replica = [_snapshots(tr, window) for tr in trajectories]
    times = np.array([p.t for p in per_replica[0]])
    if len(times) < 5:
        raise AnalysisError(f'moment window holds {len(times)} recorded times, need at least 5')
    for snaps in per_replica[1:]:
        if len(snaps) != len(times) or not np.allclose([p.t for p in snaps], times):
            raise AnalysisError('replicas were recorded on different time grids')

    moments = np.array([[phi.value(p.X).mean() for p in snaps] for snaps in per_replica])
    rhs = np.array([[weakform_rhs(p, phi, h) for p in snaps[1:-1]] for snaps in per_replica])
    lhs = (moments[:, 2:] - moments[:, :-2]) / (times[2:] - times[:-2])
    residual = lhs - rhs
    R = len(trajectories)
    se = residual.std(axis=0, ddof=1) / np.sqrt(R) if R > 1 else np.zeros(residual.shape[1])
    return pd.DataFrame({
        't': times[1:-1],
        'moment': moments[:, 1:-1].mean(axis=0),
        'lhs_derivative': lhs.mean(axis=0),
        'rhs': rhs.mean(axis=0),
        'residual': residual.mean(axis=0),
        'se': se,
    })


def balance_summary(frame: pd.DataFrame, level: float = 3.0, atol: float = 1e-9) -> Dict[str, float]:
    """|residual| <= level * se + atol во всех точках"""
    ratio = np.abs(frame['residual']) - level * frame['se']
    return {
        'max_abs_residual': float(np.abs(frame['residual']).max()),
        'max_se': float(frame['se'].max()),
        'passed': bool(np.all(ratio <= atol)),
    }


def kurtosis_series(trajectory: Trajectory) -> pd.DataFrame:
    """Избыточный эксцесс по координатам во времени (0 у гауссова закона)"""
    rows = []
    for pop in trajectory.populations:
        row = {'t': pop.t}
        for k, value in enumerate(stats.kurtosis(pop.X, axis=0, fisher=True), start=1):
            row[f'kurtosis_{k}'] = float(value)
        rows.append(row)
    return pd.DataFrame(rows)

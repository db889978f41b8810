"""Разложение шага X_{t_k} = X_{t_{k-1}} + J_k + Gamma_k и проверки спектра Sigma(J_k)"""

import logging
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .analysis_utils import log_log_fit, bootstrap_log_log_slope
from .exceptions import AnalysisError
from .kernels import eval_sigma, make_h, sigma_lipschitz_constant, HFunction
from .models import ModelSpec, Population, Trajectory
from .simulator import (
    init_population,
    pair_coefficients,
    pairwise_increment,
    meanfield_increment,
    psd_sqrt,
)

logger = logging.getLogger(__name__)

UNIT_H = make_h('constant', value=1.0)

MIN_INNER_STEPS = 10


@dataclass
class StepDecomposition:
    """Гауссова часть J и остаток Gamma одного грубого шага"""

    k: int
    particle: int
    X_prev: np.ndarray
    J: np.ndarray
    Gamma: np.ndarray
    SigmaJk: np.ndarray
    frozen_drift: np.ndarray
    increment: np.ndarray

    @property
    def gamma_fluctuation(self) -> np.ndarray:
        """Gamma без замороженного сноса: вклад изменения коэффициентов"""
        return self.Gamma - self.frozen_drift


@dataclass
class SpectrumReport:
    """Спектр Sigma(J_k)/Delta меченой частицы и нарушения границ по всем частицам"""

    k: int
    t: float
    lambda_min_over_delta: float
    bound_lower: float
    lambda_max_over_delta: float
    bound_upper: float
    trace_over_delta: float
    lambda2_hat: float
    mhat_min: float
    lower_violations: int = 0
    upper_violations: int = 0
    degenerate_mhat: bool = False

    @property
    def flagged(self) -> bool:
        return self.lower_violations > 0 or self.upper_violations > 0


@dataclass
class ScalingReport:
    """Регрессия log E|.|^p по log Delta"""

    quantity: str
    order: int
    deltas: List[float]
    means: List[float]
    slope: float
    intercept: float
    slope_stderr: float
    ci_low: float
    ci_high: float
    replicas: int
    gamma_split: str = 'drift included'
    extra: dict = field(default_factory=dict)

    def contains(self, target: float) -> bool:
        return self.ci_low <= target <= self.ci_high

    def to_dict(self):
        return asdict(self)


def sigma_jk(pop: Population, i: int, delta: float, h: HFunction) -> np.ndarray:
    """Sigma(J_k) = Delta (1/P) sum_j a(X_i - X_j)"""
    A, _ = pair_coefficients(pop.X, h, rows=[i])
    return delta * A[0]


def decompose_step(pop: Population, spec: ModelSpec, particle: Optional[int] = None, inner_steps: int = 50,
                   suppress_noise: bool = False) -> StepDecomposition:
    """Один грубый шаг Delta на мелкой сетке Delta/inner_steps.

    J накапливает sigma, замороженную в начале шага, против того же шума,
    Gamma = полное приращение - J (снос входит в Gamma).
    """
    if inner_steps < MIN_INNER_STEPS:
        raise AnalysisError(f'inner mesh delta/{inner_steps} is coarser than delta/{MIN_INNER_STEPS}')
    i = pop.tagged if particle is None else int(particle)
    h = spec.h
    X0 = pop.X.copy()
    A0, B0 = pair_coefficients(X0, h, rows=[i])
    dt = spec.delta / inner_steps
    pairwise = spec.scheme == 'pairwise-shared-noise'
    if pairwise:
        frozen_sigma = eval_sigma(X0[i] - X0, h)
    else:
        frozen_root = psd_sqrt(A0[0])

    J = np.zeros(pop.d)
    current = pop
    for j in range(inner_steps):
        stream = (pop.replica, pop.step_index, j)
        if pairwise:
            X_new, tracked = pairwise_increment(current, spec, dt, 'pair-noise-fine', stream,
                                                suppress_noise=suppress_noise, track=i)
            J += np.einsum('pab,pb->a', frozen_sigma, tracked) / np.sqrt(pop.P)
        else:
            X_new, xi = meanfield_increment(current, spec, dt, 'meanfield-noise-fine', stream,
                                            suppress_noise=suppress_noise)
            J += np.sqrt(dt) * frozen_root @ xi[i]
        current = Population(t=current.t + dt, X=X_new, tagged=pop.tagged, seed=pop.seed,
                             replica=pop.replica, step_index=pop.step_index)

    increment = current.X[i] - X0[i]
    return StepDecomposition(
        k=pop.step_index + 1,
        particle=i,
        X_prev=X0[i],
        J=J,
        Gamma=increment - J,
        SigmaJk=spec.delta * A0[0],
        frozen_drift=spec.delta * B0[0],
        increment=increment,
    )


def spectrum_bounds_check(trajectory: Trajectory, spec: ModelSpec, tol: float = 1e-10) -> List[SpectrumReport]:
    """Проверка lambda_min(Sigma)/Delta >= m lambda_min(M^) и lambda_max(Sigma)/Delta <= lambda_2 (1+|X|)^2"""
    c_sigma = sigma_lipschitz_constant(spec.h)
    reports = []
    for pop in trajectory.populations:
        if pop.step_index >= spec.n_steps and spec.n_steps > 0:
            # последний снимок не является началом шага
            continue
        A, _ = pair_coefficients(pop.X, spec.h)
        Mhat, _ = pair_coefficients(pop.X, UNIT_H)
        eig_a = np.linalg.eigvalsh(A)
        eig_m = np.linalg.eigvalsh(Mhat)
        energy = float(np.einsum('ni,ni->', pop.X, pop.X) / pop.P)
        lambda2 = 2.0 * c_sigma ** 2 * (1.0 + energy)
        radius = np.linalg.norm(pop.X, axis=1)
        lower = spec.h.m * eig_m[:, 0]
        upper = lambda2 * (1.0 + radius) ** 2
        slack = tol * np.maximum(1.0, eig_a[:, -1])
        lower_bad = int(np.sum(eig_a[:, 0] < lower - slack))
        upper_bad = int(np.sum(eig_a[:, -1] > upper))
        i = pop.tagged
        report = SpectrumReport(
            k=pop.step_index,
            t=pop.t,
            lambda_min_over_delta=float(eig_a[i, 0]),
            bound_lower=float(lower[i]),
            lambda_max_over_delta=float(eig_a[i, -1]),
            bound_upper=float(upper[i]),
            trace_over_delta=float(np.trace(A[i])),
            lambda2_hat=lambda2,
            mhat_min=float(eig_m[i, 0]),
            lower_violations=lower_bad,
            upper_violations=upper_bad,
            degenerate_mhat=bool(eig_m[:, 0].min() <= 0.0),
        )
        if report.flagged:
            logger.warning(f'Шаг {report.k}: нарушение границ спектра '
                           f'(нижних {lower_bad}, верхних {upper_bad})')
        if report.degenerate_mhat:
            logger.info(f'Шаг {report.k}: M^ вырождена хотя бы у одной частицы')
        reports.append(report)
    return reports


def spectrum_frame(reports: Sequence[SpectrumReport]) -> pd.DataFrame:
    """Таблица спектра по шагам"""
    return pd.DataFrame({
        'k': [r.k for r in reports],
        't': [r.t for r in reports],
        'lambda_min_over_delta': [r.lambda_min_over_delta for r in reports],
        'm_lambda_min_mhat': [r.bound_lower for r in reports],
        'lambda_max_over_delta': [r.lambda_max_over_delta for r in reports],
        'upper_bound': [r.bound_upper for r in reports],
        'lower_violations': [r.lower_violations for r in reports],
        'upper_violations': [r.upper_violations for r in reports],
    })


def lambda1_proxy(reports: Sequence[SpectrumReport]) -> float:
    """Эмпирический заменитель lambda_1: m * min_k lambda_min(M^_k)"""
    if not reports:
        raise AnalysisError('no spectrum reports to take lambda_1 proxy from')
    return float(min(r.bound_lower for r in reports))


def _one_replica(spec: ModelSpec, replica: int, quantity: str, order: int, inner_steps: int,
                 suppress_noise: bool) -> float:
    pop = init_population(spec, replica=replica)
    if quantity == 'increment':
        if spec.scheme == 'pairwise-shared-noise':
            X_new, _ = pairwise_increment(pop, spec, spec.delta, 'pair-noise', (replica, 0),
                                          suppress_noise=suppress_noise)
        else:
            X_new, _ = meanfield_increment(pop, spec, spec.delta, 'meanfield-noise', (replica, 0),
                                           suppress_noise=suppress_noise)
        value = X_new[pop.tagged] - pop.X[pop.tagged]
    else:
        value = decompose_step(pop, spec, inner_steps=inner_steps, suppress_noise=suppress_noise).Gamma
    return float(np.linalg.norm(value) ** order)


def increment_scaling(spec: ModelSpec, deltas: Sequence[float], replicas: int, quantity: str = 'increment',
                      order: int = 1, inner_steps: int = 50, bootstrap: int = 500, workers: int = 1,
                      suppress_noise: bool = False) -> ScalingReport:
    """Наклон log E|X_Delta - X_0|^p (или |Gamma_1|^p) по log Delta"""
    deltas = sorted({float(x) for x in deltas}, reverse=True)
    if len(deltas) < 3:
        raise AnalysisError('increment scaling needs at least 3 distinct deltas')
    if quantity not in ('increment', 'gamma'):
        raise AnalysisError(f'unknown scaling quantity {quantity!r}')
    if order not in (1, 2):
        raise AnalysisError('moment order must be 1 or 2')
    if deltas[0] / deltas[-1] < 10.0:
        logger.warning(f'Шаги Delta покрывают меньше декады: {deltas}')

    samples = []
    for delta in deltas:
        local = spec.replace(delta=delta, T=delta)
        if workers == 1:
            values = [_one_replica(local, r, quantity, order, inner_steps, suppress_noise) for r in range(replicas)]
        else:
            values = Parallel(n_jobs=workers)(
                delayed(_one_replica)(local, r, quantity, order, inner_steps, suppress_noise)
                for r in range(replicas)
            )
        samples.append(np.asarray(values))
        logger.info(f'Delta={delta:g}: E|{quantity}|^{order} = {np.mean(values):.4e}')

    means = [float(s.mean()) for s in samples]
    fit = log_log_fit(deltas, means)
    ci_low, ci_high = bootstrap_log_log_slope(deltas, samples, n_boot=bootstrap, seed=spec.seed)
    return ScalingReport(
        quantity=quantity,
        order=order,
        deltas=deltas,
        means=means,
        slope=fit['slope'],
        intercept=fit['intercept'],
        slope_stderr=fit['stderr'],
        ci_low=ci_low,
        ci_high=ci_high,
        replicas=replicas,
    )

"""Коэффициенты Ландау a, b, sigma и реестр допустимых функций h.

Все функции принимают смещение z формы (d,) или пачку смещений (..., d)
и возвращают соответственно (d, d) / (..., d, d) или (d,) / (..., d).
"""

import logging
from dataclasses import dataclass, asdict
from functools import lru_cache
from typing import Dict, Any, Optional

import numpy as np

from .exceptions import ConfigError, UnsupportedDimensionError

logger = logging.getLogger(__name__)

H_KINDS = ('constant', 'exponential-floor', 'rational-floor')

SUPPORTED_DIMENSIONS = (2, 3)


@dataclass(frozen=True)
class HFunction:
    """Функция h с границами m <= h <= M"""

    kind: str
    m: float
    M: float
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in H_KINDS:
            raise ConfigError(f'unknown h kind {self.kind!r}, expected one of {H_KINDS}', field='h.kind')
        if not (self.m > 0):
            raise ConfigError('m must be positive', field='h.m')
        if self.M < self.m:
            raise ConfigError('M must be >= m', field='h.M')
        if not (self.scale > 0):
            raise ConfigError('scale must be positive', field='h.scale')
        if self.kind == 'constant' and self.m != self.M:
            raise ConfigError('constant h requires m == M', field='h')

    @property
    def is_constant(self) -> bool:
        return self.kind == 'constant'

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == 'constant':
            return np.full_like(r, self.M)
        if self.kind == 'exponential-floor':
            return self.m + (self.M - self.m) * np.exp(-r / self.scale)
        return self.m + (self.M - self.m) / (1.0 + r / self.scale)

    def derivative(self, r):
        """Производная h'(r)"""
        r = np.asarray(r, dtype=float)
        if self.kind == 'constant':
            return np.zeros_like(r)
        if self.kind == 'exponential-floor':
            return -(self.M - self.m) / self.scale * np.exp(-r / self.scale)
        return -(self.M - self.m) / self.scale / (1.0 + r / self.scale) ** 2

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def make_h(kind: str, value: Optional[float] = None, m: Optional[float] = None,
           M: Optional[float] = None, scale: float = 1.0) -> HFunction:
    """Строит h из реестра по имени и параметрам"""
    if kind == 'constant':
        if value is None:
            value = m if m is not None else 1.0
        return HFunction('constant', float(value), float(value))
    if kind in ('exponential-floor', 'rational-floor'):
        if m is None or M is None:
            raise ConfigError(f'{kind} requires both m and M', field='h')
        return HFunction(kind, float(m), float(M), float(scale))
    raise ConfigError(f'unknown h kind {kind!r}, expected one of {H_KINDS}', field='h.kind')


def h_from_dict(data: Dict[str, Any]) -> HFunction:
    params = dict(data)
    kind = params.pop('kind', 'constant')
    if kind == 'constant' and 'value' not in params and 'm' in params:
        params = {'value': params['m']}
    return make_h(kind, **params)


def _displacement(z, sigma=False):
    z = np.asarray(z, dtype=float)
    d = z.shape[-1] if z.ndim else 0
    if sigma and d not in SUPPORTED_DIMENSIONS:
        raise UnsupportedDimensionError(d)
    if d < 2:
        raise UnsupportedDimensionError(d)
    return z, d


def eval_a(z, h: HFunction) -> np.ndarray:
    """a(z) = h(|z|^2) (|z|^2 I - z z*)"""
    z, d = _displacement(z)
    r = np.einsum('...i,...i->...', z, z)
    outer = z[..., :, None] * z[..., None, :]
    a = r[..., None, None] * np.eye(d) - outer
    return h(r)[..., None, None] * a


def eval_b(z, h: HFunction) -> np.ndarray:
    """b(z) = -(d-1) h(|z|^2) z"""
    z, d = _displacement(z)
    r = np.einsum('...i,...i->...', z, z)
    return -(d - 1) * h(r)[..., None] * z


def eval_sigma(z, h: HFunction) -> np.ndarray:
    """Явный корень sigma(z), sigma sigma* = a(z), для d = 2 и d = 3"""
    z, d = _displacement(z, sigma=True)
    r = np.einsum('...i,...i->...', z, z)
    s = np.zeros(z.shape + (d,))
    if d == 2:
        s[..., 0, 0] = z[..., 1]
        s[..., 1, 0] = -z[..., 0]
    else:
        s[..., 0, 0] = z[..., 1]
        s[..., 0, 1] = -z[..., 2]
        s[..., 1, 0] = -z[..., 0]
        s[..., 1, 2] = z[..., 2]
        s[..., 2, 1] = z[..., 0]
        s[..., 2, 2] = -z[..., 1]
    return np.sqrt(h(r))[..., None, None] * s


def sigma_times(z, w, h_values) -> np.ndarray:
    """sigma(z) w без построения матриц; h_values = h(|z|^2) той же формы, что z[..., 0]"""
    z, d = _displacement(z, sigma=True)
    w = np.asarray(w, dtype=float)
    if d == 2:
        v = np.stack([z[..., 1] * w[..., 0], -z[..., 0] * w[..., 0]], axis=-1)
    else:
        v = np.stack([
            z[..., 1] * w[..., 0] - z[..., 2] * w[..., 1],
            z[..., 2] * w[..., 2] - z[..., 0] * w[..., 0],
            z[..., 0] * w[..., 1] - z[..., 1] * w[..., 2],
        ], axis=-1)
    return np.sqrt(h_values)[..., None] * v


def check_divergence_identity(z, h: HFunction, fd_step: float = 1e-4) -> float:
    """max_i |b_i(z) - sum_j d_j a_ij(z)| по центральным разностям"""
    if not (fd_step > 0):
        raise ConfigError('fd_step must be positive', field='fd_step')
    z, d = _displacement(z)
    if z.ndim != 1:
        raise ConfigError('check_divergence_identity expects a single displacement', field='z')
    div = np.zeros(d)
    for j in range(d):
        e = np.zeros(d)
        e[j] = fd_step
        da = (eval_a(z + e, h) - eval_a(z - e, h)) / (2.0 * fd_step)
        div += da[:, j]
    return float(np.max(np.abs(eval_b(z, h) - div)))


def check_h_bounds(h: HFunction, r_max: float = 100.0, n: int = 10001) -> bool:
    """Плотная проверка m <= h(r) <= M на [0, r_max] и в пределе r -> inf"""
    r = np.concatenate([np.linspace(0.0, r_max, n), [np.inf]])
    values = h(r)
    ok = bool(np.all(values >= h.m) and np.all(values <= h.M))
    if not ok:
        logger.warning(f'h вышла за границы [{h.m}, {h.M}]: min={values.min()}, max={values.max()}')
    return ok


@lru_cache(maxsize=64)
def sigma_lipschitz_constant(h: HFunction) -> float:
    """C_sigma = sup_r [sqrt(h(r)) + r |h'(r)| / sqrt(h(r))]"""
    if h.is_constant:
        return float(np.sqrt(h.M))
    r = np.concatenate([[0.0], np.logspace(-6, 6, 20001) * h.scale])
    hr = h(r)
    values = np.sqrt(hr) + r * np.abs(h.derivative(r)) / np.sqrt(hr)
    # предел r -> inf равен sqrt(m)
    return float(max(values.max(), np.sqrt(h.m)))


def identity_battery(n: int = 10000, seed: int = 0, hs=None, dims=SUPPORTED_DIMENSIONS) -> Dict[str, Any]:
    """Проверяет алгебраические тождества ядра на n случайных смещениях"""
    from .rng import keyed_generator

    if hs is None:
        hs = default_h_family()
    results = {}
    passed = True
    for h in hs:
        for d in dims:
            rng = keyed_generator(seed, 'kernel-battery', d, H_KINDS.index(h.kind))
            z = rng.standard_normal((n, d)) * rng.exponential(2.0, size=(n, 1))
            r = np.einsum('ni,ni->n', z, z)
            a = eval_a(z, h)
            s = eval_sigma(z, h)
            b = eval_b(z, h)
            sst = np.einsum('nij,nkj->nik', s, s)
            factorization = np.max(np.abs(sst - a), axis=(1, 2)) / (1.0 + r) ** 2
            kernel = np.linalg.norm(np.einsum('nij,nj->ni', a, z), axis=1)
            kernel_bound = 1e-13 * h.M * np.maximum(r, 1.0) ** 1.5
            symmetric = (
                np.array_equal(eval_a(-z, h), a)
                and np.array_equal(eval_b(-z, h), -b)
                and np.array_equal(eval_sigma(-z, h), -s)
            )
            eig_min = float(np.linalg.eigvalsh(a).min())
            entry = {
                'max_factorization_residual': float(factorization.max()),
                'max_kernel_residual_ratio': float((kernel / kernel_bound).max()),
                'symmetries_exact': bool(symmetric),
                'min_eigenvalue': eig_min,
            }
            if h.is_constant:
                div = max(
                    check_divergence_identity(zz, h, 1e-4) / (1.0 + np.linalg.norm(zz))
                    for zz in z[:200]
                )
                entry['max_divergence_residual'] = float(div)
            entry['passed'] = bool(
                entry['max_factorization_residual'] <= 1e-12
                and entry['max_kernel_residual_ratio'] <= 1.0
                and symmetric
                and eig_min >= -1e-12 * max(1.0, float(r.max()) * h.M)
                and entry.get('max_divergence_residual', 0.0) <= 1e-6
            )
            passed = passed and entry['passed']
            results[f'{h.kind}/d={d}'] = entry
    return {'passed': passed, 'cases': results}


def default_h_family():
    """Три h, по одной на каждый вид реестра"""
    return (
        make_h('constant', value=1.0),
        make_h('exponential-floor', m=0.5, M=2.0),
        make_h('rational-floor', m=0.5, M=2.0),
    )

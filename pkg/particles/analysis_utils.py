import logging
from typing import Dict, List, Optional, Any, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go
import plotly.io as pio
from scipy import stats

from .rng import keyed_generator

logger = logging.getLogger(__name__)

# Палитра графиков
SAGE = '#a8b8a5'
TAUPE = '#d4c9be'
CHOCOLATE = '#8b6b4f'
SLATE = '#6c7b7d'
INK = '#3c2f2f'


def log_log_fit(x: Sequence[float], y: Sequence[float]) -> Dict[str, float]:
    """Линейная регрессия log y по log x"""
    result = stats.linregress(np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float)))
    return {
        'slope': float(result.slope),
        'intercept': float(result.intercept),
        'stderr': float(result.stderr),
        'rvalue': float(result.rvalue),
    }


def bootstrap_log_log_slope(x: Sequence[float], samples: Sequence[np.ndarray], n_boot: int = 500,
                            seed: int = 0, level: float = 0.95):
    """Перцентильный бутстреп-интервал наклона по репликам в каждой точке x"""
    logx = np.log(np.asarray(x, dtype=float))
    rng = keyed_generator(seed, 'bootstrap', len(samples))
    slopes = np.empty(n_boot)
    for b in range(n_boot):
        means = [s[rng.integers(0, len(s), size=len(s))].mean() for s in samples]
        slopes[b] = np.polyfit(logx, np.log(means), 1)[0]
    alpha = (1.0 - level) / 2.0
    return float(np.quantile(slopes, alpha)), float(np.quantile(slopes, 1.0 - alpha))


def weighted_least_squares(design: np.ndarray, target: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Коэффициенты взвешенного МНК"""
    design = np.asarray(design, dtype=float)
    target = np.asarray(target, dtype=float)
    if weights is None:
        weights = np.ones_like(target)
    root = np.sqrt(np.asarray(weights, dtype=float))
    coef, *_ = np.linalg.lstsq(design * root[:, None], target * root, rcond=None)
    return coef


def calculate_statistics(moments: pd.DataFrame) -> Dict[str, Any]:
    """Сводка по временному ряду моментов"""
    if moments.empty:
        return {}
    mean_cols = [c for c in moments.columns if c.startswith('mean_')]
    first, last = moments.iloc[0], moments.iloc[-1]
    energy0 = float(first['energy'])
    return {
        'n_records': int(len(moments)),
        't_final': float(last['t']),
        'energy_initial': energy0,
        'energy_final': float(last['energy']),
        'energy_relative_drift': abs(float(last['energy']) - energy0) / energy0 if energy0 else 0.0,
        'max_mean_drift': float(np.max(np.abs(moments[mean_cols].to_numpy() - first[mean_cols].to_numpy(dtype=float)))),
        'min_eig_empirical': float(moments['min_eig_empirical'].min()),
    }


def _layout(fig, height=350, **axes):
    fig.update_layout(
        height=height,
        margin=dict(l=20, r=20, t=10, b=20),
        plot_bgcolor='white',
        paper_bgcolor='white',
        font=dict(color=INK),
        **axes,
    )
    return pio.to_html(fig, full_html=True, config={'displayModeBar': False})


def create_moment_timeline_chart(moments: pd.DataFrame) -> Optional[str]:
    """Энергия и средние по времени"""
    if len(moments) < 2:
        return None
    fig = go.Figure()
    fig.add_trace(go.Scatter(
        x=moments['t'], y=moments['energy'], mode='lines+markers', name='energy',
        line=dict(color=SLATE, width=2),
    ))
    for col in [c for c in moments.columns if c.startswith('mean_')]:
        fig.add_trace(go.Scatter(x=moments['t'], y=moments[col], mode='lines', name=col,
                                 line=dict(color=CHOCOLATE, dash='dot')))
    return _layout(fig, xaxis_title='t', yaxis_title='moment')


def create_spectrum_chart(spectrum: pd.DataFrame) -> Optional[str]:
    """Спектр Sigma(J_k)/Delta и его границы"""
    if spectrum.empty:
        return None
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=spectrum['t'], y=spectrum['lambda_min_over_delta'], name='lambda_min/Delta',
                             line=dict(color=SLATE, width=2)))
    fig.add_trace(go.Scatter(x=spectrum['t'], y=spectrum['m_lambda_min_mhat'], name='m lambda_min(M^)',
                             line=dict(color=SAGE, dash='dash')))
    fig.add_trace(go.Scatter(x=spectrum['t'], y=spectrum['lambda_max_over_delta'], name='lambda_max/Delta',
                             line=dict(color=CHOCOLATE, width=2)))
    fig.add_trace(go.Scatter(x=spectrum['t'], y=spectrum['upper_bound'], name='lambda_2 (1+|X|)^2',
                             line=dict(color=TAUPE, dash='dash')))
    return _layout(fig, xaxis_title='t', yaxis_title='eigenvalue / Delta', yaxis_type='log')


def create_density_chart(field: pd.DataFrame) -> Optional[str]:
    """Карта ядерной оценки плотности (только d = 2)"""
    if field.empty or 'v_3' in field.columns:
        return None
    pivot = field.pivot_table(index='v_2', columns='v_1', values='value')
    fig = go.Figure(data=[go.Heatmap(
        x=pivot.columns, y=pivot.index, z=pivot.to_numpy(), colorscale='YlGnBu',
    )])
    return _layout(fig, height=450, xaxis_title='v_1', yaxis_title='v_2')


def create_tail_chart(tail: pd.DataFrame) -> Optional[str]:
    """Эмпирический хвост и экспоненциальная граница"""
    if tail.empty:
        return None
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=tail['r'], y=tail['empirical_tail'], mode='markers', name='P(|X_t| >= r)',
                             marker=dict(color=SLATE, size=6)))
    fig.add_trace(go.Scatter(x=tail['r'], y=tail['bound'], mode='lines', name='bound',
                             line=dict(color=CHOCOLATE, width=2)))
    return _layout(fig, xaxis_title='r', yaxis_title='probability', yaxis_type='log')


def create_scaling_chart(report: Dict[str, Any]) -> Optional[str]:
    """Регрессия масштабирования в log-log"""
    deltas = report.get('deltas') or []
    if len(deltas) < 2:
        return None
    fit = np.exp(report['intercept']) * np.asarray(deltas) ** report['slope']
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=deltas, y=report['means'], mode='markers', name=report['quantity'],
                             marker=dict(color=SLATE, size=8)))
    fig.add_trace(go.Scatter(x=deltas, y=fit, mode='lines', name=f"slope {report['slope']:.3f}",
                             line=dict(color=CHOCOLATE)))
    return _layout(fig, xaxis_title='Delta', yaxis_title='mean', xaxis_type='log', yaxis_type='log')

"""Конвейеры экспериментов.

Каждый конвейер получает RunContext, пишет артефакты через ArtifactWriter
и отмечает проверки в манифесте. Провал проверки не исключение: он только
попадает в манифест, а в строгом режиме даёт ненулевой код выхода.
"""

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import pandas as pd

from landau_lab import __version__
from .analysis_utils import (
    calculate_statistics,
    create_density_chart,
    create_moment_timeline_chart,
    create_scaling_chart,
    create_spectrum_chart,
    create_tail_chart,
)
from .artifacts import ArtifactWriter, read_manifest
from .bounds_verification import gaussian_oracle_fields, tail_experiment, verify_logmartingale, verify_sandwich
from .density_estimation import conditional_density_experiment
from .exceptions import LabError
from .kernels import identity_battery
from .models import ExperimentConfig, ModelSpec, RecordingPlan, RunManifest
from .scheme_analysis import decompose_step, increment_scaling, lambda1_proxy, spectrum_bounds_check, spectrum_frame
from .simulator import run, run_replicas
from .weakform_checker import TestFunction, balance_summary, kurtosis_series, moment_balance_check, weakform_rhs

logger = logging.getLogger(__name__)

ENERGY_TOLERANCE = 0.05
INCREMENT_TARGET, INCREMENT_BAND = 0.5, 0.1
GAMMA_TARGET, GAMMA_BAND = 1.0, 0.15
MASS_TOLERANCE = 0.05
IDENTITY_TOLERANCE = 1e-12


@dataclass
class RunContext:
    config: ExperimentConfig
    writer: ArtifactWriter
    manifest: RunManifest
    cache: Dict[str, Any] = field(default_factory=dict)

    @property
    def spec(self) -> ModelSpec:
        return self.config.model


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


def _with_P(spec: ModelSpec, P):
    return spec.replace(P=P) if P else spec


def check_kernels(ctx: RunContext):
    """Тождества ядра на случайных смещениях"""
    battery = identity_battery(n=ctx.config.kernels.samples, seed=ctx.spec.seed)
    ctx.writer.write_json('kernels/identities.json', battery)
    ctx.manifest.add_check('kernel_identities', battery['passed'], cases=len(battery['cases']))


def simulate(ctx: RunContext):
    """Реплики популяции: моменты, путь меченой частицы, снимки, законы сохранения"""
    config, spec, writer = ctx.config, ctx.spec, ctx.writer
    trajectories = run_replicas(spec, config.recording, config.replicas, config.workers)
    ctx.cache['trajectories'] = trajectories

    if config.recording.moments:
        moments = pd.concat([tr.moments_frame().assign(replica=tr.replica) for tr in trajectories],
                            ignore_index=True)
        writer.write_frame('simulate/moments.csv', moments)
    if config.recording.tagged_path:
        rows = []
        for tr in trajectories:
            path = pd.DataFrame(tr.tagged_array(), columns=[f'v_{i}' for i in range(1, spec.d + 1)])
            path.insert(0, 't', tr.time_grid())
            path.insert(0, 'replica', tr.replica)
            rows.append(path)
        writer.write_frame('simulate/tagged_path.csv', pd.concat(rows, ignore_index=True))

    first = trajectories[0]
    snapshots = []
    for pop in first.populations:
        name = f'simulate/snapshots/r{first.replica:03d}_k{pop.step_index:06d}.csv'
        writer.write_snapshot(name, pop, spec)
        snapshots.append({'t': pop.t, 'step_index': pop.step_index, 'file': name})
    writer.write_json('simulate/trajectory.json', {
        'spec_hash': spec.content_hash(),
        'n_steps': spec.n_steps,
        'replicas': config.replicas,
        'snapshots': snapshots,
        'statistics': calculate_statistics(first.moments_frame()) if config.recording.moments else {},
    })

    if spec.scheme == 'pairwise-shared-noise':
        drift = max(float(np.max(np.abs(tr.final.X.sum(axis=0) - tr.initial.X.sum(axis=0)))) for tr in trajectories)
        bound = 1e-9 * spec.P * max(spec.n_steps, 1)
        ctx.manifest.add_check('momentum_conservation', drift <= bound, drift=drift, bound=bound)
    else:
        ctx.manifest.add_check('momentum_conservation', None, status='skipped',
                               reason='meanfield-gaussian conserves momentum only in expectation')

    e0 = np.mean([np.einsum('ni,ni->', tr.initial.X, tr.initial.X) / spec.P for tr in trajectories])
    eT = np.mean([np.einsum('ni,ni->', tr.final.X, tr.final.X) / spec.P for tr in trajectories])
    change = abs(eT - e0) / e0
    ctx.manifest.add_check('energy_in_expectation[simulate]', change <= ENERGY_TOLERANCE, relative_change=change,
                           replicas=config.replicas)
    logger.info(f'Моделирование: {config.replicas} реплик, относительное изменение энергии {change:.4f}')


def _trajectories(ctx: RunContext):
    if 'trajectories' not in ctx.cache:
        ctx.cache['trajectories'] = run_replicas(ctx.spec, ctx.config.recording, 1, 1)
    return ctx.cache['trajectories']


def _cache_spectrum_proxies(ctx: RunContext, reports):
    ctx.cache['lambda1_hat'] = lambda1_proxy(reports)
    ctx.cache['lambda2_hat'] = max(r.lambda2_hat for r in reports)


def _spectrum_proxies(ctx: RunContext):
    """lambda_1 и lambda_2 по спектру шума траектории; считаются один раз на прогон"""
    if 'lambda1_hat' not in ctx.cache:
        _cache_spectrum_proxies(ctx, spectrum_bounds_check(_trajectories(ctx)[0], ctx.spec))
    return ctx.cache['lambda1_hat'], ctx.cache['lambda2_hat']


def analyze_scheme(ctx: RunContext):
    """Спектр Sigma(J_k), разложение шага, регрессии масштабирования"""
    config, spec, writer = ctx.config, ctx.spec, ctx.writer
    trajectory = _trajectories(ctx)[0]
    reports = spectrum_bounds_check(trajectory, spec)
    writer.write_frame('scheme/spectrum.csv', spectrum_frame(reports))
    lower = sum(r.lower_violations for r in reports)
    upper = sum(r.upper_violations for r in reports)
    ctx.manifest.add_check('spectrum_lower_bound', lower == 0, violations=lower, steps=len(reports))
    ctx.manifest.add_check('spectrum_upper_bound', upper == 0, violations=upper, steps=len(reports))
    _cache_spectrum_proxies(ctx, reports)

    dec = decompose_step(trajectory.initial, spec, inner_steps=config.scheme.inner_steps)
    writer.write_json('scheme/step_decomposition.json', {
        'k': dec.k,
        'particle': dec.particle,
        'X_prev': dec.X_prev,
        'J': dec.J,
        'Gamma': dec.Gamma,
        'frozen_drift': dec.frozen_drift,
        'gamma_fluctuation': dec.gamma_fluctuation,
        'increment': dec.increment,
        'SigmaJk': dec.SigmaJk,
        'gamma_split': 'drift included',
    })

    local = _with_P(spec, config.scheme.P)
    results = {}
    for quantity, target, band in (('increment', INCREMENT_TARGET, INCREMENT_BAND), ('gamma', GAMMA_TARGET, GAMMA_BAND)):
        report = increment_scaling(local, config.scheme.deltas, config.scheme.replicas, quantity=quantity, order=1,
                                   inner_steps=config.scheme.inner_steps, bootstrap=config.scheme.bootstrap,
                                   workers=config.workers)
        results[quantity] = report.to_dict()
        writer.write_frame(f'scheme/scaling_{quantity}.csv',
                           pd.DataFrame({'delta': report.deltas, 'mean': report.means}))
        passed = report.contains(target) and abs(report.slope - target) <= band
        ctx.manifest.add_check(f'{quantity}_scaling', passed, slope=report.slope, ci=[report.ci_low, report.ci_high],
                               target=target, band=band)
    writer.write_json('scheme/scaling.json', results)


def estimate_density(ctx: RunContext):
    """KDE условной плотности меченой частицы"""
    config, spec, writer = ctx.config, ctx.spec, ctx.writer
    section = config.density
    local = _with_P(spec, section.P)
    if section.eta is None:
        lambda1_hat, _ = _spectrum_proxies(ctx)
    else:
        lambda1_hat = ctx.cache.get('lambda1_hat')
    fields = conditional_density_experiment(
        local, section.x0, section.times, replicas=section.replicas, mollifier_kind=section.mollifier,
        eta=section.eta, pool_all=section.pool_all, workers=config.workers, spacing=section.spacing,
        radius=section.radius, lambda1_hat=lambda1_hat, mass_radius=section.mass_radius,
    )
    ctx.cache['density_fields'] = fields
    masses = []
    for density in fields:
        writer.write_density(f'density/t_{density.t:g}', density, local.content_hash())
        masses.append(density.total_mass())
    nonnegative = all(bool(np.all(f.values >= 0)) for f in fields)
    positive = all(bool(np.all(f.values[f.significant()] > 0)) for f in fields)
    ctx.manifest.add_check('density_nonnegative', nonnegative)
    ctx.manifest.add_check('density_positivity', positive)
    worst = max(abs(mass - 1.0) for mass in masses)
    ctx.manifest.add_check('density_mass', worst <= MASS_TOLERANCE, masses=masses, worst_deviation=worst,
                           mass_radius=section.mass_radius, pooled_all=section.pool_all)


def verify_bounds(ctx: RunContext):
    """Эталонный гауссов сэндвич, сэндвич для KDE Ландау, хвост и квадратичная вариация"""
    config, spec, writer = ctx.config, ctx.spec, ctx.writer
    section, density = config.bounds, config.density

    oracle = gaussian_oracle_fields(density.x0, density.times, n=section.oracle_samples, radius=density.radius,
                                    spacing=density.spacing, mollifier_kind=density.mollifier,
                                    eta=density.eta or 0.2, seed=spec.seed)
    report = verify_sandwich(oracle, significance=section.significance,
                             max_violation_fraction=section.max_violation_fraction)
    writer.write_json('bounds/sandwich_oracle.json', report.to_dict())
    _sandwich_check(ctx, 'sandwich_gaussian_oracle', report)

    if 'density_fields' not in ctx.cache:
        estimate_density(ctx)
    lambda1_hat, lambda2_hat = _spectrum_proxies(ctx)
    report = verify_sandwich(ctx.cache['density_fields'], significance=section.significance,
                             max_violation_fraction=section.max_violation_fraction,
                             lambda1_hat=lambda1_hat, lambda2_hat=lambda2_hat)
    writer.write_json('bounds/sandwich.json', report.to_dict())
    if not report.points.empty:
        writer.write_frame('bounds/sandwich_points.csv', report.points)
    _sandwich_check(ctx, 'density_sandwich', report)

    local = _with_P(spec, section.P)
    tail = tail_experiment(local, density.x0, section.tail_time, section.tail_replicas, workers=config.workers,
                           quantile_low=section.quantile_low, quantile_high=section.quantile_high,
                           n_radii=section.n_radii, significance=section.significance,
                           max_violation_fraction=section.max_violation_fraction)
    writer.write_frame('bounds/tail.csv', tail.to_frame())
    writer.write_json('bounds/tail.json', tail.to_dict())
    ctx.manifest.add_check('tail_bound', tail.status == 'pass' if tail.status != 'inconclusive' else None,
                           status=tail.status, violations=tail.violations, n_test=tail.n_test)

    qv_spec = local.replace(delta=section.qv_delta, T=section.tail_time)
    plan = RecordingPlan(every=0, tagged_path=True, moments=True, tagged_coefficients=True, keep_populations=False)
    trajectory = run(qv_spec, plan, pin_tagged_at=density.x0)
    martingale = verify_logmartingale(trajectory)
    writer.write_frame('bounds/logmartingale.csv', martingale.frame)
    writer.write_json('bounds/logmartingale.json', martingale.to_dict())
    ctx.manifest.add_check('logmartingale_qv', martingale.passed, slope=martingale.qv_slope,
                           max_rate=martingale.max_compensator_rate, c=martingale.c)


def _sandwich_check(ctx: RunContext, name: str, report):
    passed = None if report.status == 'inconclusive' else report.status == 'pass'
    ctx.manifest.add_check(name, passed, status=report.status, violation_fraction=report.violation_fraction,
                           n_test=report.n_test, positivity=report.positivity)


def check_moments(ctx: RunContext):
    """Баланс моментов по слабой форме и тождества для v_i и |v|^2"""
    config, spec, writer = ctx.config, ctx.spec, ctx.writer
    section = config.moments
    every = config.recording.every or max(1, spec.n_steps // 10)
    plan = RecordingPlan(every=every, tagged_path=False, moments=True, keep_populations=True)
    trajectories = run_replicas(spec, plan, section.replicas, config.workers)

    frames = []
    for name in section.functions:
        phi = TestFunction.from_name(name, spec.d)
        frame = moment_balance_check(trajectories, phi, spec.h, section.window)
        summary = balance_summary(frame)
        frames.append(frame.assign(function=name))
        ctx.manifest.add_check(f'moment_balance[{name}]', **summary)
    writer.write_frame('moments/balance.csv', pd.concat(frames, ignore_index=True))

    energy = TestFunction.energy(spec.d)
    momentum = [TestFunction.coordinate(i, spec.d) for i in range(spec.d)]
    worst_energy = worst_momentum = 0.0
    for tr in trajectories:
        for pop in tr.populations:
            scale = spec.h.M * spec.d * (1.0 + np.einsum('ni,ni->', pop.X, pop.X) / pop.P) ** 2
            worst_energy = max(worst_energy, abs(weakform_rhs(pop, energy, spec.h)) / scale)
            worst_momentum = max(worst_momentum, max(abs(weakform_rhs(pop, phi, spec.h)) for phi in momentum) / scale)
    ctx.manifest.add_check('weakform_energy_identity', worst_energy <= IDENTITY_TOLERANCE, worst=worst_energy)
    ctx.manifest.add_check('weakform_momentum_identity', worst_momentum <= IDENTITY_TOLERANCE, worst=worst_momentum)

    e0 = np.mean([energy.value(tr.initial.X).mean() for tr in trajectories])
    eT = np.mean([energy.value(tr.final.X).mean() for tr in trajectories])
    change = abs(eT - e0) / e0
    ctx.manifest.add_check('energy_in_expectation', change <= ENERGY_TOLERANCE, relative_change=change,
                           replicas=section.replicas)
    writer.write_frame('moments/kurtosis.csv', kurtosis_series(trajectories[0]))


SUITE_STAGES = (
    ('check-kernels', check_kernels),
    ('simulate', simulate),
    ('analyze-scheme', analyze_scheme),
    ('estimate-density', estimate_density),
    ('verify-bounds', verify_bounds),
    ('check-moments', check_moments),
)


def full_suite(ctx: RunContext):
    """Все конвейеры подряд; ошибка одного этапа не останавливает остальные"""
    for name, stage in SUITE_STAGES:
        logger.info(f'Этап {name}')
        try:
            stage(ctx)
        except LabError as e:
            logger.error(f'Этап {name} прерван: {e}')
            ctx.manifest.add_error(e)


def run_experiment(config: ExperimentConfig) -> RunManifest:
    """Запускает конвейер эксперимента и пишет манифест"""
    from .urls import resolve_experiment

    pipeline = resolve_experiment(config.experiment)
    manifest = RunManifest(
        config_hash=config.content_hash(),
        seed=config.model.seed,
        code_version=__version__,
        experiment=config.experiment,
        started_at=_now(),
    )
    writer = ArtifactWriter(Path(config.output_dir), manifest)
    hashed = config.to_dict()
    hashed.pop('output_dir')
    hashed.pop('workers')
    writer.write_json('config.json', {'config': hashed, 'config_hash': manifest.config_hash})
    ctx = RunContext(config=config, writer=writer, manifest=manifest)
    try:
        pipeline(ctx)
    except LabError as e:
        logger.error(f'Эксперимент {config.experiment} прерван: {e}')
        manifest.add_error(e)
    manifest.finished_at = _now()
    writer.write_manifest()
    status = manifest.exit_status(config.strict)
    logger.info(f'Готово: {len(manifest.checks)} проверок, провалено {len(manifest.failed_checks)}, код {status}')
    return manifest


def render_plots(run_dir) -> List[str]:
    """HTML-графики по артефактам прогона; список пишется в plots.json, файлы - в манифест"""
    root = Path(run_dir)
    if not root.is_dir():
        raise LabError(f'run directory not found: {root}')
    writer = ArtifactWriter(root, read_manifest(root))
    charts = []
    moments = root / 'simulate' / 'moments.csv'
    if moments.exists():
        frame = pd.read_csv(moments)
        charts.append(('moments.html', create_moment_timeline_chart(frame[frame['replica'] == frame['replica'].min()])))
    spectrum = root / 'scheme' / 'spectrum.csv'
    if spectrum.exists():
        charts.append(('spectrum.html', create_spectrum_chart(pd.read_csv(spectrum))))
    for path in sorted((root / 'density').glob('t_*.csv')):
        charts.append((f'density_{path.stem}.html', create_density_chart(pd.read_csv(path))))
    tail = root / 'bounds' / 'tail.csv'
    if tail.exists():
        charts.append(('tail.html', create_tail_chart(pd.read_csv(tail))))
    scaling = root / 'scheme' / 'scaling.json'
    if scaling.exists():
        for quantity, report in json.loads(scaling.read_text(encoding='utf-8')).items():
            charts.append((f'scaling_{quantity}.html', create_scaling_chart(report)))

    written = []
    for name, html in charts:
        if html is None:
            continue
        writer.write_text(f'plots/{name}', html)
        written.append(f'plots/{name}')
    writer.write_json('plots.json', {'plots': written})
    writer.write_manifest()
    logger.info(f'Построено графиков: {len(written)}')
    return written

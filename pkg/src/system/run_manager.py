"""Runs the requested methods of a test case on one shared grid and time
layout and collects snapshots, error series and diagnostics."""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Set, Union

import numpy as np

from utils import log_info, log_warning, print_section_header
from .case_loader import Method, TestCase
from .errors import BlowUpError, ConfigurationError
from .grid import GridField
from .metrics import attracting_set_check, lp_error
from .models import BetaKind, barenblatt_translated
from .particle_solver import ParticleEnsemble, ParticleSolver, estimate_density
from .relaxation_solver import RelaxationRun, run_relaxation
from .run_report import DiagnosticRow, ErrorRow, RunReport

PAIR_ORDER = (
    (Method.PARTICLE, Method.RELAXATION),
    (Method.PARTICLE, Method.EXACT),
    (Method.RELAXATION, Method.EXACT),
)
BLOWUP_FACTOR = 10.0
FREEZE_MARGIN = 0.05


def pair_name(a: Method, b: Method) -> str:
    return f"{a.value}-{b.value}"


def parse_methods(methods: Union[str, Iterable[Union[str, Method]]]) -> Set[Method]:
    if isinstance(methods, str):
        methods = [m for m in methods.split(',') if m.strip()]
    try:
        parsed = {Method(str(m).strip().lower()) for m in methods}
    except ValueError as e:
        raise ConfigurationError(f"{e}; expected a subset of particle, relaxation, exact") from None
    if not parsed:
        raise ConfigurationError("no method requested")
    return parsed


def _time_key(t: float) -> float:
    return round(t, 12)


def _at(by_time: Dict[float, GridField], t: float) -> GridField:
    """Field at time t, or at the nearest stored time."""
    key = _time_key(t)
    if key in by_time:
        return by_time[key]
    return by_time[min(by_time, key=lambda s: abs(s - key))]


class CaseRunner:
    def __init__(self, case: TestCase):
        self.case = case
        self._step_callbacks: List[Callable[[ParticleEnsemble, GridField], None]] = []

    def add_step_callback(self, callback: Callable[[ParticleEnsemble, GridField], None]):
        """Called with every particle ensemble and its density on the grid."""
        self._step_callbacks.append(callback)

    def run(self, methods: Union[str, Iterable[Union[str, Method]]]) -> RunReport:
        case = self.case
        methods = parse_methods(methods)
        if Method.EXACT in methods and not case.has_exact_solution:
            raise ConfigurationError(f"case '{case.id}' has no exact solution")
        ordered = [m for m in Method if m in methods]
        report = RunReport(case.id, case.scale.value, case.seed, case.grid, [m.value for m in ordered])

        snapshot_times = sorted(case.snapshot_times)
        if Method.PARTICLE in methods:
            error_times = [k * case.dt_prob for k in range(case.n_steps + 1)]
        else:
            error_times = list(snapshot_times)

        fields: Dict[Method, Dict[float, GridField]] = {}
        print_section_header(f"{case.id} ({case.scale.value})")
        running = None
        try:
            if Method.RELAXATION in methods:
                running = Method.RELAXATION
                self._run_relaxation(report, fields, error_times, snapshot_times)
            if Method.PARTICLE in methods:
                running = Method.PARTICLE
                self._run_particles(report, fields)
        except BlowUpError as e:
            self._abort(report, fields, snapshot_times, running, e)
            raise
        if Method.EXACT in methods:
            fields[Method.EXACT] = {
                _time_key(t): GridField(case.grid, np.asarray(barenblatt_translated(t, case.grid.centers)), t)
                for t in set(error_times) | set(snapshot_times)
            }

        for method in ordered:
            by_time = fields[method]
            report.snapshots[method.value] = [_at(by_time, t) for t in snapshot_times]
            if method != Method.RELAXATION:
                report.diagnostics[method.value] = [
                    DiagnosticRow(f.time, f.mass(), f.max())
                    for f in (_at(by_time, t) for t in error_times)
                ]

        for a, b in PAIR_ORDER:
            if a in methods and b in methods:
                rows = []
                for t in error_times:
                    fa, fb = _at(fields[a], t), _at(fields[b], t)
                    rows.append(ErrorRow(t, lp_error(fa, fb, 'L1'), lp_error(fa, fb, 'L2')))
                report.errors[pair_name(a, b)] = rows
        self._check_errors(report)

        if case.beta.kind == BetaKind.HEAVISIDE:
            for method in ordered:
                final = report.final_snapshot(method.value)
                check = attracting_set_check(final, case.beta.u_c, case.attracting_tol)
                report.attracting[method.value] = check
                log_info(f"{method.value}: final mass {check.mass:.6g}, excess over u_c {check.excess:.4g}, "
                         f"{'[green]in[/green]' if check.in_set else '[yellow]outside[/yellow]'} the attracting set")
        return report

    def _run_relaxation(self, report: RunReport, fields: Dict[Method, Dict[float, GridField]],
                        error_times: List[float], snapshot_times: List[float]):
        case = self.case
        outputs = sorted({_time_key(t) for t in list(error_times) + list(snapshot_times)})
        log_info(f"relaxation: k={case.k}, {case.tableau}, phi={case.phi}, dx={case.grid.dx:.4g}, "
                 f"dt={case.dt_det:.4g}")
        try:
            run = run_relaxation(case.relaxation_config(outputs))
        except BlowUpError as e:
            if e.partial is not None:
                self._store_relaxation(report, fields, e.partial)
            raise
        self._store_relaxation(report, fields, run)
        if case.beta.kind == BetaKind.HEAVISIDE and run.diagnostics:
            report.plateau = run.diagnostics[-1].plateau

    @staticmethod
    def _store_relaxation(report: RunReport, fields: Dict[Method, Dict[float, GridField]],
                          run: RelaxationRun):
        report.diagnostics[Method.RELAXATION.value] = [
            DiagnosticRow(d.time, d.mass, d.max) for d in run.diagnostics
        ]
        fields[Method.RELAXATION] = {_time_key(f.time): f for f in run.snapshots}

    def _run_particles(self, report: RunReport, fields: Dict[Method, Dict[float, GridField]]):
        case = self.case
        densities: Dict[float, GridField] = {}
        fields[Method.PARTICLE] = densities
        freeze_threshold = case.beta.u_c - FREEZE_MARGIN if case.beta.kind == BetaKind.HEAVISIDE else None
        freeze = {'step': None, 'positions': None, 'holds': True}

        def on_step(ens: ParticleEnsemble):
            density = estimate_density(ens, case.grid)
            densities[_time_key(ens.time)] = density
            if freeze_threshold is not None:
                if freeze['step'] is not None:
                    if not np.array_equal(ens.positions, freeze['positions']):
                        freeze['holds'] = False
                elif density.max() < freeze_threshold:
                    freeze['step'], freeze['positions'] = ens.step, ens.positions.copy()
            for callback in self._step_callbacks:
                callback(ens, density)

        log_info(f"particles: n={case.n_particles}, dt={case.dt_prob:.4g}, {case.n_steps} steps, "
                 f"{case.bandwidth_method.value} bandwidth")
        solver = ParticleSolver(case.particle_config())
        solver.add_step_callback(on_step)
        run = solver.run()

        report.bandwidth_times = list(run.times)
        report.bandwidths = list(run.bandwidths)
        report.trajectory_times = list(run.times)
        report.trajectories = {i: list(path) for i, path in run.trajectories.items()}
        report.frozen_from_step = run.frozen_from()
        if freeze['step'] is not None:
            report.freeze_holds = freeze['holds']
            if not freeze['holds']:
                log_warning(f"particles moved after the density fell below u_c - {FREEZE_MARGIN} "
                            f"at step {freeze['step']}")

    @staticmethod
    def _abort(report: RunReport, fields: Dict[Method, Dict[float, GridField]],
               snapshot_times: List[float], method: Optional[Method], error: BlowUpError):
        """Keep the snapshots reached so far, ending on the last good state."""
        for name, by_time in fields.items():
            if not by_time:
                continue
            last = by_time[max(by_time)]
            kept = [by_time[_time_key(t)] for t in snapshot_times if _time_key(t) in by_time]
            if not kept or kept[-1] is not last:
                kept.append(last)
            report.snapshots[name.value] = kept
        last_good = report.final_snapshot(method.value) if method is not None else None
        report.blowup = {
            'method': method.value if method is not None else None,
            'time': error.time,
            'last_good_time': last_good.time if last_good is not None else None,
            'message': str(error),
        }
        error.report = report

    def _check_errors(self, report: RunReport):
        for pair, rows in report.errors.items():
            values = np.array([[r.l1, r.l2] for r in rows])
            if values.size and not np.all(np.isfinite(values)):
                log_warning(f"{pair}: non-finite error values")
        guarded = pair_name(Method.PARTICLE, Method.RELAXATION)
        series = report.error_series(guarded)
        if series.size > 1 and series[0] > 0 and series.max() > BLOWUP_FACTOR * series[0]:
            log_warning(f"{guarded}: L2 difference grew to {series.max():.4g}, "
                        f"more than {BLOWUP_FACTOR:g}x its initial value {series[0]:.4g}")


def run_test_case(case: TestCase, methods: Union[str, Iterable[Union[str, Method]]]) -> RunReport:
    return CaseRunner(case).run(methods)

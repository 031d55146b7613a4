"""Acceptance checks behind the ``validate`` subcommand.

Each check returns (passed, detail). By default every check runs, the
desk-scale particle runs included; ``full=False`` keeps the quick ones.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, List, Optional, Tuple

import numpy as np

from utils import get_verbosity, set_verbosity
from .case_loader import CaseLoader, Method, Scale
from .grid import GridField
from .kde import Sample, kde_at_sites, pair_sum, solve_the_equation_bandwidth
from .metrics import lp_error
from .models import barenblatt_translated, density_sample, gaussian_mixture
from .particle_solver import estimate_density, run_particles
from .relaxation_solver import (TABLEAUX, eno_tables, reconstruct, reconstruct_derivative,
                                rk_ode_step)
from .run_manager import pair_name, run_test_case
from .run_report import RunReport, export_csv

CheckResult = Tuple[bool, str]


@dataclass
class Check:
    name: str
    run: Callable[[], CheckResult]
    slow: bool = False


def rational_eno_tables(k: int):
    """Exact C, D, Dbar (dx = 1) in rational arithmetic."""
    def weights(s):
        row = []
        for j in range(k):
            value = Fraction(1)
            for l in range(k):
                if l != j:
                    value *= (s - l) / Fraction(j - l)
            row.append(value)
        return row

    def slopes(s):
        row = []
        for j in range(k):
            denom = Fraction(1)
            for l in range(k):
                if l != j:
                    denom *= j - l
            total = Fraction(0)
            for m in range(k):
                if m != j:
                    term = Fraction(1)
                    for l in range(k):
                        if l not in (j, m):
                            term *= s - l
                    total += term
            row.append(total / denom)
        return row

    half = Fraction(1, 2)
    c = [weights(r - half) for r in range(k + 1)]
    d = [slopes(Fraction(r)) for r in range(k)]
    dbar = [slopes(r - half) for r in range(k + 1)]
    return c, d, dbar


def check_eno_tables() -> CheckResult:
    worst = 0.0
    for k in (1, 2, 3):
        tables = eno_tables(k, 1.0)
        for table, exact in zip((tables.C, tables.D, tables.Dbar), rational_eno_tables(k)):
            worst = max(worst, float(np.max(np.abs(table - np.array(exact, dtype=float)))))
        worst = max(worst, float(np.max(np.abs(tables.C.sum(axis=1) - 1.0))),
                    float(np.max(np.abs(tables.D.sum(axis=1)))),
                    float(np.max(np.abs(tables.Dbar.sum(axis=1)))))
    return worst <= 1e-14, f"max deviation {worst:.2e}"


def check_reconstruction() -> CheckResult:
    rng = np.random.default_rng(7)
    k, dx = 3, 0.1
    tables = eno_tables(k, dx)
    x = -1.0 + (np.arange(-k, 20 + k) + 0.5) * dx
    value_err = slope_err = 0.0
    for _ in range(10):
        c0, c1, c2 = rng.normal(size=3)
        v = c0 + c1 * x + c2 * x * x
        dv = c1 + 2 * c2 * x
        interior, ghosts = v[k:-k], (v[:k], v[-k:])
        faces = -1.0 + np.arange(21) * dx
        u_minus, u_plus = reconstruct(interior, tables, ghosts)
        exact = c0 + c1 * faces + c2 * faces * faces
        value_err = max(value_err, np.max(np.abs(u_minus - exact)), np.max(np.abs(u_plus - exact)))
        d_minus, d_plus, d_centers = reconstruct_derivative(interior, tables, False, ghosts)
        slope = c1 + 2 * c2 * faces
        slope_err = max(slope_err, np.max(np.abs(d_minus - slope)), np.max(np.abs(d_plus - slope)),
                        np.max(np.abs(d_centers - dv[k:-k])))
    ok = value_err <= 1e-12 and slope_err <= 1e-10
    return ok, f"values {value_err:.1e}, derivatives {slope_err:.1e}"


def measured_rk_order(tableau_name: str = 'ssp_rk3', steps=(1e-2, 5e-3, 2.5e-3)) -> float:
    errors = []
    for dt in steps:
        y = np.array([1.0])
        n = int(round(1.0 / dt))
        for _ in range(n):
            y = rk_ode_step(y, dt, TABLEAUX[tableau_name], lambda s: -s)
        errors.append(abs(y[0] - np.exp(-1.0)))
    orders = [np.log2(errors[i] / errors[i + 1]) for i in range(len(errors) - 1)]
    return float(np.mean(orders))


def check_rk_order() -> CheckResult:
    order = measured_rk_order()
    return 2.7 <= order <= 3.3, f"observed order {order:.3f}"


def check_bandwidth_recovery() -> CheckResult:
    n = 10_000
    target = (4.0 / (3.0 * n)) ** 0.2
    ratios = []
    for seed in range(10):
        x = np.random.default_rng(seed).standard_normal(n)
        ratios.append(solve_the_equation_bandwidth(x, exact_limit=2000).epsilon / target)
    median = float(np.median(ratios))
    return abs(median - 1.0) <= 0.2, f"median eps / AMISE optimum = {median:.3f}"


def check_kde_equivalence() -> CheckResult:
    rng = np.random.default_rng(11)
    spec = gaussian_mixture((0.5, 0.3, 0.2), (-1.0, 0.5, 2.0), (0.3, 0.5, 0.2))
    sample = Sample(density_sample(spec, 2000, rng))
    worst = 0.0
    for r, h in ((4, 0.3), (6, 0.35), (4, 0.15)):
        exact = pair_sum(sample, r, h, exact_limit=10_000)
        binned = pair_sum(sample, r, h, exact_limit=100)
        worst = max(worst, abs(binned - exact) / abs(exact))
    eps = 0.1
    sites_exact = kde_at_sites(sample, eps, truncation=None)
    sites_cut = kde_at_sites(sample, eps)
    worst = max(worst, float(np.max(np.abs(sites_cut - sites_exact) / sites_exact)))
    return worst <= 1e-3, f"max relative difference {worst:.1e}"


def barenblatt_relaxation_errors(dx: float, loader: Optional[CaseLoader] = None):
    case = (loader or CaseLoader()).load('barenblatt', Scale.DESK, {'dx': dx})
    report = run_test_case(case, [Method.RELAXATION, Method.EXACT])
    errors = report.error_series(pair_name(Method.RELAXATION, Method.EXACT))
    masses = [row.mass for row in report.diagnostics[Method.RELAXATION.value]]
    return errors, masses


def check_barenblatt_relaxation() -> CheckResult:
    coarse, masses = barenblatt_relaxation_errors(0.05)
    fine, _ = barenblatt_relaxation_errors(0.025)
    drift = abs(masses[-1] - masses[0]) / masses[0]
    ok = coarse.max() <= 0.02 and fine[-1] < coarse[-1] and drift <= 1e-8
    return ok, f"L2 max {coarse.max():.2e} (dx=0.05), final {fine[-1]:.2e} (dx=0.025), mass drift {drift:.1e}"


def barenblatt_particle_error(n: int, seed: int) -> float:
    case = CaseLoader().load('barenblatt', Scale.DESK, {'n_particles': n, 'seed': seed,
                                                        'snapshot_times': [1.5]})
    run = run_particles(case.particle_config())
    field = estimate_density(run.snapshots[-1].ensemble, case.grid)
    exact = GridField(case.grid, np.asarray(barenblatt_translated(case.T, case.grid.centers)), case.T)
    return lp_error(field, exact, 'L2')


def check_barenblatt_particles() -> CheckResult:
    large = float(np.median([barenblatt_particle_error(5000, seed) for seed in range(5)]))
    small = float(np.median([barenblatt_particle_error(500, seed) for seed in range(5)]))
    return large <= 0.05 and large < small, f"median L2 {large:.3e} (n=5000), {small:.3e} (n=500)"


def exports_identical(first: RunReport, second: RunReport) -> bool:
    """Both reports written out give byte-identical files."""
    with tempfile.TemporaryDirectory() as a_dir, tempfile.TemporaryDirectory() as b_dir:
        a_files = export_csv(first, a_dir)
        b_files = export_csv(second, b_dir)
        if [p.name for p in a_files] != [p.name for p in b_files]:
            return False
        return all(a.read_bytes() == b.read_bytes() for a, b in zip(a_files, b_files))


def check_heaviside_cross_validation(out_dir=None) -> CheckResult:
    case = CaseLoader().load('tc1', Scale.DESK)
    first = run_test_case(case, [Method.PARTICLE, Method.RELAXATION])
    second = run_test_case(case, [Method.PARTICLE, Method.RELAXATION])
    l2 = first.error_series(pair_name(Method.PARTICLE, Method.RELAXATION))
    mass_ok = all(abs(row.mass - 1.0) <= 0.01 for rows in first.diagnostics.values() for row in rows)
    in_set = all(check.in_set for check in first.attracting.values())
    freeze_ok = first.freeze_holds is not False
    same = exports_identical(first, second)
    if out_dir is not None:
        export_csv(first, out_dir)
    ok = l2.max() <= 0.1 and mass_ok and in_set and freeze_ok and same
    return ok, (f"L2 max {l2.max():.3e}, mass within 1%: {mass_ok}, attracting set: {in_set}, "
                f"freezing: {freeze_ok}, deterministic: {same}")


CHECKS: List[Check] = [
    Check("ENO tables match rational oracle", check_eno_tables),
    Check("ENO reconstruction exact on quadratics", check_reconstruction),
    Check("SSP-RK3 order on u' = -u", check_rk_order),
    Check("bandwidth recovers the AMISE optimum", check_bandwidth_recovery),
    Check("binned/truncated sums match exact sums", check_kde_equivalence),
    Check("Barenblatt relaxation error and mass", check_barenblatt_relaxation),
    Check("Barenblatt particle error", check_barenblatt_particles, slow=True),
    Check("Heaviside test case 1 cross-validation", check_heaviside_cross_validation, slow=True),
]


def run_checks(full: bool = True, quiet: bool = True) -> List[Tuple[str, bool, str]]:
    results = []
    previous = get_verbosity()
    if quiet:
        set_verbosity(0)
    try:
        for check in CHECKS:
            if check.slow and not full:
                continue
            try:
                ok, detail = check.run()
            except Exception as e:
                ok, detail = False, f"{type(e).__name__}: {e}"
            results.append((check.name, bool(ok), detail))
    finally:
        set_verbosity(previous)
    return results

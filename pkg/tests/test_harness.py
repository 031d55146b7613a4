import math

import numpy as np
import pytest

from system.case_loader import (Method, Scale, TestCase, build_test_case,
                                parse_config_file, parse_config_text)
from system.errors import BlowUpError, ConfigurationError, ExportError, GridMismatchError
from system.grid import Grid1D, GridField
from system.metrics import attracting_set_check, lp_error
from system.models import BetaKind
from system.run_manager import CaseRunner, pair_name, parse_methods, run_test_case
from system.run_report import (DIAGNOSTICS_FILE, ERRORS_FILE, RunReport, export_csv, load_report,
                               read_errors_csv, read_snapshots_csv, snapshot_file)

FULL_SCALE_TABLE = {
    # id: (u_c, a, b, T)
    'tc1': (0.15, -7.0, 7.0, 0.6),
    'tc2': (0.08, -8.5, 8.5, 4.0),
    'tc3': (0.3, -2.5, 2.0, 0.5),
    'tc4': (0.3, -1.5, 3.5, 0.6),
    'tc5': (0.35, -2.0, 2.0, 0.45),
}


def short_tc1(loader, **extra):
    overrides = {'T': 0.01, 'snapshot_times': [0.0, 0.01], 'n_particles': 500}
    overrides.update(extra)
    return loader.load('tc1', Scale.DESK, overrides)


_deck_relaxation_config = TestCase.relaxation_config


def _unstable_relaxation_config(self, output_times=None):
    config = _deck_relaxation_config(self, output_times)
    config.dt = 0.5  # far past the CFL bound, set after validation
    return config


class TestMetrics:
    def test_identical_fields(self):
        field = GridField(Grid1D(0.0, 1.0, 10), np.linspace(0.0, 1.0, 10))
        assert lp_error(field, field, 'L1') == 0.0
        assert lp_error(field, field, 'L2') == 0.0

    def test_constant_difference(self):
        grid = Grid1D(0.0, 1.0, 50)
        fa = GridField(grid, np.full(50, 1.25))
        fb = GridField(grid, np.full(50, 1.0))
        assert lp_error(fa, fb, 'L1') == pytest.approx(0.25)
        assert lp_error(fa, fb, 'L2') == pytest.approx(0.25)

    def test_half_indicator(self):
        grid = Grid1D(0.0, 1.0, 40)
        values = np.zeros(40)
        values[:20] = 1.0
        fa, fb = GridField(grid, values), GridField(grid, np.zeros(40))
        assert lp_error(fa, fb, 'L1') == pytest.approx(0.5)
        assert lp_error(fa, fb, 'L2') == pytest.approx(math.sqrt(0.5))

    def test_grid_mismatch(self):
        fa = GridField(Grid1D(0.0, 1.0, 10), np.zeros(10))
        fb = GridField(Grid1D(0.0, 2.0, 10), np.zeros(10))
        with pytest.raises(GridMismatchError):
            lp_error(fa, fb)

    def test_attracting_set_member(self):
        u_c = 0.25
        grid = Grid1D(0.0, 10.0, 1000)
        values = np.where(grid.centers < 1.0 / u_c, u_c, 0.0)
        check = attracting_set_check(GridField(grid, values), u_c, 1e-6)
        assert check.in_set
        assert check.mass == pytest.approx(1.0)
        assert check.excess == 0.0

    def test_attracting_set_outsider(self):
        u_c = 0.25
        grid = Grid1D(0.0, 10.0, 1000)
        values = np.where(grid.centers < 1.0 / (2.0 * u_c), 2.0 * u_c, 0.0)
        check = attracting_set_check(GridField(grid, values), u_c, 0.03)
        assert not check.in_set
        assert check.excess == pytest.approx(u_c)


class TestCaseLoader:
    def test_available(self, loader):
        assert set(FULL_SCALE_TABLE) | {'barenblatt'} <= set(loader.available())

    @pytest.mark.parametrize("case_id", sorted(FULL_SCALE_TABLE))
    def test_full_scale_parameters(self, loader, case_id):
        case = loader.load(case_id, Scale.PAPER)
        u_c, a, b, T = FULL_SCALE_TABLE[case_id]
        assert case.beta.kind == BetaKind.HEAVISIDE
        assert case.beta.u_c == u_c
        assert (case.grid.a, case.grid.b) == (a, b)
        assert case.T == T
        assert case.grid.dx == pytest.approx(0.02)
        assert case.dt_det == pytest.approx(4e-6)
        assert case.dt_prob == pytest.approx(2e-4)
        assert case.n_particles == 50_000

    def test_full_scale_tc1_step_count(self, loader):
        assert loader.load('tc1', Scale.PAPER).particle_config().n_steps == 3000

    def test_desk_defaults(self, loader):
        case = loader.load('tc1')
        assert case.scale == Scale.DESK
        assert case.grid.dx == pytest.approx(0.05)
        assert case.dt_det == pytest.approx(2.5e-5)
        assert case.n_particles == 5000
        assert case.snapshot_times == (0.0, 0.3, 0.6)
        assert not case.has_exact_solution
        assert loader.load('barenblatt').has_exact_solution

    def test_overrides(self, loader):
        case = loader.load('tc1', Scale.DESK, {'dx': 0.1, 'seed': 7, 'u_c': 0.2})
        assert case.grid.dx == pytest.approx(0.1)
        assert case.seed == 7
        assert case.beta.u_c == 0.2

    def test_unknown_key(self, loader):
        with pytest.raises(ConfigurationError, match="nonsense"):
            loader.load('tc1', Scale.DESK, {'nonsense': 1})

    def test_unknown_case(self, loader):
        with pytest.raises(ConfigurationError, match="unknown case"):
            loader.load('tc9')

    def test_inconsistent_override(self, loader):
        with pytest.raises(ConfigurationError):
            loader.load('tc1', Scale.DESK, {'T': 0.6005})
        with pytest.raises(ConfigurationError):
            loader.load('tc1', Scale.DESK, {'dt_det': 1e-3})

    @pytest.mark.parametrize("overrides", [
        {'phi': 0}, {'k': 0}, {'bandwidth_tol': 0}, {'c_stab': 0}, {'bandwidth_stride': 0},
        {'snapshot_times': []}, {'attracting_tol': -0.01}, {'phi': 0, 'k': 0, 'bandwidth_tol': 0},
    ])
    def test_zero_override_is_validated(self, loader, overrides):
        with pytest.raises(ConfigurationError):
            loader.load('tc1', Scale.DESK, overrides)

    def test_falsy_override_is_kept(self, loader):
        case = loader.load('tc1', Scale.DESK, {'exact_pair_limit': 0, 'track_particles': [],
                                               'attracting_tol': 0.0, 'seed': 0})
        assert case.exact_pair_limit == 0
        assert case.track_particles == ()
        assert case.attracting_tol == 0.0
        assert case.seed == 0

    def test_deck_missing_keys(self):
        with pytest.raises(ConfigurationError, match="missing"):
            build_test_case({'id': 'x', 'desk': {'dx': 0.1}}, Scale.DESK, {})

    def test_dict_round_trip(self, loader):
        case = loader.load('tc3')
        assert TestCase.from_dict(case.to_dict()) == case


class TestConfigText:
    def test_parse(self):
        values = parse_config_text("seed = 3\n# comment\nsnapshot_times = [0, 0.5]  # trailing\n\nrobust_spread = true\n")
        assert values == {'seed': 3, 'snapshot_times': [0, 0.5], 'robust_spread': True}

    def test_bad_line(self):
        with pytest.raises(ConfigurationError, match="line|key = value"):
            parse_config_text("seed 3")

    def test_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("n_particles = 1000\ndx = 0.1\n", encoding='utf-8')
        assert parse_config_file(path) == {'n_particles': 1000, 'dx': 0.1}
        with pytest.raises(ConfigurationError):
            parse_config_file(tmp_path / "missing.cfg")


class TestRunner:
    def test_parse_methods(self):
        assert parse_methods("particle, exact") == {Method.PARTICLE, Method.EXACT}
        assert parse_methods([Method.RELAXATION]) == {Method.RELAXATION}
        with pytest.raises(ConfigurationError):
            parse_methods("particle,finite_elements")
        with pytest.raises(ConfigurationError):
            parse_methods("")

    def test_exact_needs_barenblatt(self, loader):
        with pytest.raises(ConfigurationError):
            run_test_case(loader.load('tc1'), "relaxation,exact")

    def test_relaxation_against_exact(self, loader):
        case = loader.load('barenblatt', Scale.DESK, {'T': 0.1, 'snapshot_times': [0.0, 0.05, 0.1]})
        report = run_test_case(case, [Method.RELAXATION, Method.EXACT])
        errors = report.error_series(pair_name(Method.RELAXATION, Method.EXACT))
        assert len(errors) == 3
        assert errors[0] < 1e-12
        assert np.all(errors < 0.01)
        assert [f.time for f in report.snapshots['relaxation']] == [0.0, 0.05, 0.1]
        masses = [row.mass for row in report.diagnostics['relaxation']]
        assert masses[-1] == pytest.approx(masses[0], rel=1e-10)

    def test_particles_against_relaxation(self, loader):
        case = short_tc1(loader)
        seen = []
        runner = CaseRunner(case)
        runner.add_step_callback(lambda ens, density: seen.append(density.time))
        report = runner.run("particle,relaxation")
        assert report.methods == ['particle', 'relaxation']
        rows = report.errors[pair_name(Method.PARTICLE, Method.RELAXATION)]
        assert len(rows) == case.n_steps + 1
        assert rows[0].time == 0.0
        assert len(seen) == case.n_steps + 1
        assert set(report.attracting) == {'particle', 'relaxation'}
        assert len(report.bandwidths) == case.n_steps + 1
        assert list(report.trajectories) == [0]

    def test_deterministic(self, loader):
        first = run_test_case(short_tc1(loader, seed=3), "particle")
        second = run_test_case(short_tc1(loader, seed=3), "particle")
        for a, b in zip(first.snapshots['particle'], second.snapshots['particle']):
            assert np.array_equal(a.values, b.values)

    def test_frozen_below_threshold(self, loader):
        # the trimodal peak (about 1.33) stays below u_c - 0.05, so Phi = 0 everywhere from the start
        case = short_tc1(loader, u_c=2.0)
        positions = []
        runner = CaseRunner(case)
        runner.add_step_callback(lambda ens, density: positions.append(ens.positions.copy()))
        report = runner.run("particle")
        assert len(positions) == case.n_steps + 1
        for later in positions[1:]:
            assert np.array_equal(later, positions[0])
        assert report.frozen_from_step == 0
        assert report.freeze_holds is True

    def test_blow_up_keeps_partial_report(self, loader, monkeypatch):
        monkeypatch.setattr(TestCase, 'relaxation_config', _unstable_relaxation_config)
        case = loader.load('barenblatt', Scale.DESK, {'T': 50.0, 'snapshot_times': [0.0, 50.0]})
        with pytest.raises(BlowUpError) as info:
            run_test_case(case, "relaxation")
        report = info.value.report
        assert report.blowup['method'] == 'relaxation'
        fields = report.snapshots['relaxation']
        assert fields[0].time == 0.0
        assert fields[-1].time == report.blowup['last_good_time'] < 50.0
        assert all(np.all(np.isfinite(f.values)) for f in fields)


class TestExport:
    def test_empty_report_has_headers_only(self, tmp_path):
        report = RunReport('tc1', 'desk', 0, Grid1D(0.0, 1.0, 4), ['relaxation'])
        export_csv(report, tmp_path)
        assert (tmp_path / snapshot_file('relaxation')).read_text(encoding='utf-8') == "t,x,u\n"
        assert (tmp_path / ERRORS_FILE).read_text(encoding='utf-8') == "t\n"
        assert (tmp_path / DIAGNOSTICS_FILE).read_text(encoding='utf-8') == "method,t,mass,max\n"

    def test_round_trip(self, loader, tmp_path):
        case = short_tc1(loader)
        report = run_test_case(case, "particle,relaxation")
        export_csv(report, tmp_path)

        for method in report.methods:
            fields = read_snapshots_csv(tmp_path / snapshot_file(method), case.grid)
            assert [f.time for f in fields] == [f.time for f in report.snapshots[method]]
            for a, b in zip(fields, report.snapshots[method]):
                assert np.array_equal(a.values, b.values)

        assert read_errors_csv(tmp_path / ERRORS_FILE) == report.errors

        loaded = load_report(tmp_path)
        assert loaded.errors == report.errors
        assert loaded.diagnostics == report.diagnostics
        assert loaded.bandwidths == report.bandwidths
        assert loaded.attracting == report.attracting
        assert loaded.trajectories == report.trajectories
        for method, fields in report.snapshots.items():
            for a, b in zip(loaded.snapshots[method], fields):
                assert a.grid == case.grid and a.time == b.time
                assert np.array_equal(a.values, b.values)

    def test_repeat_run_exports_identical_bytes(self, loader, tmp_path):
        written = []
        for name in ("first", "second"):
            report = run_test_case(short_tc1(loader, seed=4), "particle,relaxation")
            written.append(export_csv(report, tmp_path / name))
        first, second = written
        assert [p.name for p in first] == [p.name for p in second]
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes(), a.name

    def test_grid_field_dict(self):
        grid = Grid1D(-1.0, 1.0, 5)
        field = GridField(grid, np.linspace(0.0, 0.4, 5), 0.25)
        restored = GridField.from_dict(field.to_dict())
        assert restored.grid == grid and restored.time == 0.25
        assert np.array_equal(restored.values, field.values)
        assert 'grid' not in field.to_dict(with_grid=False)
        assert np.array_equal(GridField.from_dict(field.to_dict(with_grid=False), grid).values, field.values)

    def test_blow_up_exports_last_good_snapshot(self, loader, tmp_path, monkeypatch, capsys):
        from main_cli import cli_main
        monkeypatch.setattr(TestCase, 'relaxation_config', _unstable_relaxation_config)
        status = cli_main(["-q", "run", "--case", "barenblatt", "--methods", "relaxation",
                           "--set", "T=50", "--set", "snapshot_times=[0, 50]", "--out", str(tmp_path)])
        assert status == 2
        assert "last good snapshot" in capsys.readouterr().err
        fields = read_snapshots_csv(tmp_path / snapshot_file('relaxation'), loader.load('barenblatt').grid)
        loaded = load_report(tmp_path)
        assert fields[0].time == 0.0
        assert fields[-1].time == loaded.blowup['last_good_time'] < 50.0
        assert all(np.all(np.isfinite(f.values)) for f in fields)

    def test_unwritable_target(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x", encoding='utf-8')
        report = RunReport('tc1', 'desk', 0, Grid1D(0.0, 1.0, 4), ['relaxation'])
        with pytest.raises(ExportError):
            export_csv(report, blocker / "out")


@pytest.mark.slow
class TestDeskAcceptance:
    def test_heaviside_cross_validation(self, loader, tmp_path):
        case = loader.load('tc1', Scale.DESK)
        report = run_test_case(case, "particle,relaxation")
        export_csv(report, tmp_path)
        with open(tmp_path / ERRORS_FILE, encoding='utf-8') as f:
            assert sum(1 for _ in f) - 1 == case.n_steps + 1 == 601

        l2 = report.error_series(pair_name(Method.PARTICLE, Method.RELAXATION))
        assert np.all(np.isfinite(l2))
        assert l2.max() <= 0.1
        for rows in report.diagnostics.values():
            assert all(abs(row.mass - 1.0) <= 0.01 for row in rows)
        assert all(check.in_set for check in report.attracting.values())
        assert report.freeze_holds is not False
        for method in ('particle', 'relaxation'):
            assert [f.time for f in report.snapshots[method]] == pytest.approx([0.0, 0.3, 0.6])

    def test_barenblatt_particles(self):
        from system.validation import check_barenblatt_particles
        ok, detail = check_barenblatt_particles()
        assert ok, detail

    def test_barenblatt_refinement(self):
        from system.validation import check_barenblatt_relaxation
        ok, detail = check_barenblatt_relaxation()
        assert ok, detail

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import ExportError
from .grid import Grid1D, GridField
from .kde import BandwidthReport
from .metrics import AttractingSetCheck

REPORT_FILE = "report.json"
ERRORS_FILE = "errors.csv"
DIAGNOSTICS_FILE = "diagnostics.csv"
BANDWIDTHS_FILE = "bandwidths.csv"
TRAJECTORIES_FILE = "trajectories.csv"


def fmt(value: float) -> str:
    return f"{value:.17g}"


def snapshot_file(method: str) -> str:
    return f"snapshots_{method}.csv"


@dataclass(frozen=True)
class ErrorRow:
    time: float
    l1: float
    l2: float


@dataclass(frozen=True)
class DiagnosticRow:
    time: float
    mass: float
    max: float


class RunReport:
    def __init__(self, case_id: str, scale: str, seed: int, grid: Grid1D, methods: List[str]):
        self.case_id = case_id
        self.scale = scale
        self.seed = seed
        self.grid = grid
        self.methods = list(methods)
        self.snapshots: Dict[str, List[GridField]] = {}
        self.errors: Dict[str, List[ErrorRow]] = {}
        self.diagnostics: Dict[str, List[DiagnosticRow]] = {}
        self.bandwidth_times: List[float] = []
        self.bandwidths: List[BandwidthReport] = []
        self.attracting: Dict[str, AttractingSetCheck] = {}
        self.plateau: Optional[Tuple[float, float, int]] = None
        self.trajectory_times: List[float] = []
        self.trajectories: Dict[int, List[float]] = {}
        self.frozen_from_step: Optional[int] = None
        self.freeze_holds: Optional[bool] = None
        self.blowup: Optional[Dict[str, Any]] = None

    def error_series(self, pair: str, norm: str = 'L2') -> np.ndarray:
        rows = self.errors.get(pair, [])
        return np.array([row.l2 if norm == 'L2' else row.l1 for row in rows])

    def final_snapshot(self, method: str) -> Optional[GridField]:
        fields = self.snapshots.get(method) or []
        return fields[-1] if fields else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'case_id': self.case_id,
            'scale': self.scale,
            'seed': self.seed,
            'grid': self.grid.to_dict(),
            'methods': self.methods,
            'snapshots': {
                method: [f.to_dict(with_grid=False) for f in fields]
                for method, fields in self.snapshots.items()
            },
            'errors': {pair: [[r.time, r.l1, r.l2] for r in rows] for pair, rows in self.errors.items()},
            'diagnostics': {m: [[r.time, r.mass, r.max] for r in rows] for m, rows in self.diagnostics.items()},
            'bandwidth_times': self.bandwidth_times,
            'bandwidths': [b.to_dict() for b in self.bandwidths],
            'attracting': {m: c.to_dict() for m, c in self.attracting.items()},
            'plateau': list(self.plateau) if self.plateau is not None else None,
            'trajectory_times': self.trajectory_times,
            'trajectories': {str(i): path for i, path in self.trajectories.items()},
            'frozen_from_step': self.frozen_from_step,
            'freeze_holds': self.freeze_holds,
            'blowup': self.blowup,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunReport':
        grid = Grid1D.from_dict(data['grid'])
        report = cls(data['case_id'], data['scale'], int(data['seed']), grid, data['methods'])
        report.snapshots = {
            method: [GridField.from_dict(s, grid) for s in shots]
            for method, shots in data.get('snapshots', {}).items()
        }
        report.errors = {pair: [ErrorRow(*map(float, row)) for row in rows]
                         for pair, rows in data.get('errors', {}).items()}
        report.diagnostics = {m: [DiagnosticRow(*map(float, row)) for row in rows]
                              for m, rows in data.get('diagnostics', {}).items()}
        report.bandwidth_times = [float(t) for t in data.get('bandwidth_times', [])]
        report.bandwidths = [BandwidthReport.from_dict(b) for b in data.get('bandwidths', [])]
        report.attracting = {m: AttractingSetCheck.from_dict(c) for m, c in data.get('attracting', {}).items()}
        plateau = data.get('plateau')
        report.plateau = (float(plateau[0]), float(plateau[1]), int(plateau[2])) if plateau else None
        report.trajectory_times = [float(t) for t in data.get('trajectory_times', [])]
        report.trajectories = {int(i): [float(x) for x in path]
                               for i, path in data.get('trajectories', {}).items()}
        report.frozen_from_step = data.get('frozen_from_step')
        report.freeze_holds = data.get('freeze_holds')
        report.blowup = data.get('blowup')
        return report


# CSV -------------------------------------------------------------------------

def _write_rows(path: Path, header: List[str], rows) -> Path:
    try:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise ExportError(path, e.strerror or str(e)) from e
    return path


def _snapshot_rows(fields: List[GridField]):
    for field in fields:
        t = fmt(field.time)
        for x, u in zip(field.grid.centers, field.values):
            yield [t, fmt(x), fmt(u)]


def _error_rows(report: RunReport):
    pairs = list(report.errors)
    times = sorted({row.time for rows in report.errors.values() for row in rows})
    by_pair = {pair: {row.time: row for row in rows} for pair, rows in report.errors.items()}
    for t in times:
        line = [fmt(t)]
        for pair in pairs:
            row = by_pair[pair].get(t)
            line += [fmt(row.l1), fmt(row.l2)] if row else ['', '']
        yield line


def export_csv(report: RunReport, directory: Union[str, Path]) -> List[Path]:
    """Write one snapshot file per method, errors.csv, diagnostics.csv and report.json."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ExportError(directory, e.strerror or str(e)) from e

    written = []
    for method in report.methods:
        written.append(_write_rows(directory / snapshot_file(method), ['t', 'x', 'u'],
                                   _snapshot_rows(report.snapshots.get(method, []))))

    header = ['t']
    for pair in report.errors:
        header += [f"{pair}_L1", f"{pair}_L2"]
    written.append(_write_rows(directory / ERRORS_FILE, header, _error_rows(report)))

    written.append(_write_rows(
        directory / DIAGNOSTICS_FILE, ['method', 't', 'mass', 'max'],
        ([method, fmt(r.time), fmt(r.mass), fmt(r.max)]
         for method, rows in report.diagnostics.items() for r in rows)))

    if report.bandwidths:
        written.append(_write_rows(
            directory / BANDWIDTHS_FILE,
            ['t', 'epsilon', 'h1', 'h2', 'curvature_norm', 'iterations', 'fallback'],
            ([fmt(t), fmt(b.epsilon), fmt(b.h1), fmt(b.h2), fmt(b.curvature_norm), b.iterations, int(b.fallback)]
             for t, b in zip(report.bandwidth_times, report.bandwidths))))

    if report.trajectories:
        indices = sorted(report.trajectories)
        written.append(_write_rows(
            directory / TRAJECTORIES_FILE, ['t'] + [f"particle_{i}" for i in indices],
            ([fmt(t)] + [fmt(report.trajectories[i][step]) for i in indices]
             for step, t in enumerate(report.trajectory_times))))

    report_path = directory / REPORT_FILE
    try:
        with open(report_path, 'w', encoding='utf-8') as f:
            json.dump(report.to_dict(), f, indent=2)
    except OSError as e:
        raise ExportError(report_path, e.strerror or str(e)) from e
    written.append(report_path)
    return written


def _read_rows(path: Path) -> Tuple[List[str], List[List[str]]]:
    try:
        with open(path, 'r', newline='', encoding='utf-8') as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise ExportError(path, e.strerror or str(e)) from e
    if not rows:
        raise ExportError(path, "empty file, header missing")
    return rows[0], rows[1:]


def read_snapshots_csv(path: Union[str, Path], grid: Grid1D) -> List[GridField]:
    path = Path(path)
    _, rows = _read_rows(path)
    blocks: Dict[float, List[float]] = {}
    for row in rows:
        blocks.setdefault(float(row[0]), []).append(float(row[2]))
    try:
        return [GridField(grid, np.array(values), t) for t, values in blocks.items()]
    except ValueError as e:
        raise ExportError(path, f"snapshot does not fit the grid: {e}") from e


def read_errors_csv(path: Union[str, Path]) -> Dict[str, List[ErrorRow]]:
    header, rows = _read_rows(Path(path))
    pairs = [name[:-3] for name in header[1::2]]
    out: Dict[str, List[ErrorRow]] = {pair: [] for pair in pairs}
    for row in rows:
        t = float(row[0])
        for index, pair in enumerate(pairs):
            l1, l2 = row[1 + 2 * index], row[2 + 2 * index]
            if l1 != '':
                out[pair].append(ErrorRow(t, float(l1), float(l2)))
    return out


def load_report(directory: Union[str, Path]) -> RunReport:
    path = Path(directory) / REPORT_FILE
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return RunReport.from_dict(json.load(f))
    except OSError as e:
        raise ExportError(path, e.strerror or str(e)) from e

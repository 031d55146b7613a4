import argparse
import csv
import os
import sys
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from system.case_loader import CaseLoader, Method, OVERRIDE_KEYS, Scale, parse_config_file, parse_config_text
from system.errors import BlowUpError, ConfigurationError, LabError
from system.kde import EXACT_PAIR_LIMIT, BandwidthMethod, Sample, select_bandwidth
from system.relaxation_solver import eno_tables
from system.run_manager import run_test_case
from system.run_report import export_csv
from system.validation import run_checks
from utils import log_error, log_info, print_rich, print_section_header, set_verbosity

SEED_ENV = "PML_SEED"


def _format_fraction(value: float) -> str:
    return str(Fraction(value).limit_denominator(10 ** 6))


def _format_rows(matrix: np.ndarray) -> List[str]:
    return ["[" + ", ".join(_format_fraction(v) for v in row) + "]" for row in matrix]


def _collect_overrides(args) -> Dict[str, Any]:
    """Config file < PML_SEED < --set < dedicated flags."""
    overrides: Dict[str, Any] = {}
    if args.config:
        overrides.update(parse_config_file(args.config))
    env_seed = os.environ.get(SEED_ENV)
    if env_seed:
        try:
            overrides['seed'] = int(env_seed)
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got '{env_seed}'") from None
    for item in args.set or []:
        overrides.update(parse_config_text(item, "--set"))
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.n_particles is not None:
        overrides['n_particles'] = args.n_particles
    if args.bandwidth_stride is not None:
        overrides['bandwidth_stride'] = args.bandwidth_stride
    return overrides


def cmd_run(args) -> int:
    loader = CaseLoader(args.cases) if args.cases else CaseLoader()
    case = loader.load(args.case, args.scale, _collect_overrides(args))
    out_dir = Path(args.out) if args.out else Path("runs") / f"{case.id}_{case.scale.value}_seed{case.seed}"
    try:
        report = run_test_case(case, args.methods)
    except BlowUpError as e:
        if e.report is not None:
            written = export_csv(e.report, out_dir)
            log_error(f"run aborted; wrote {len(written)} files up to the last good snapshot "
                      f"(t={e.report.blowup['last_good_time']}) to {out_dir}")
        raise
    written = export_csv(report, out_dir)
    for pair, rows in report.errors.items():
        if rows:
            worst = max(row.l2 for row in rows)
            log_info(f"{pair}: L2 final {rows[-1].l2:.4e}, max {worst:.4e}")
    log_info(f"[green]wrote {len(written)} files to {out_dir}[/green]")
    return 0


def _read_samples(path: Path) -> np.ndarray:
    values = []
    try:
        with open(path, 'r', newline='', encoding='utf-8') as f:
            for row in csv.reader(f):
                if not row or not row[0].strip():
                    continue
                try:
                    values.append(float(row[0]))
                except ValueError:
                    if values:
                        raise LabError(f"{path}: not a number: '{row[0]}'") from None
                    # header line
    except OSError as e:
        raise LabError(f"cannot read {path}: {e.strerror}") from None
    return np.array(values)


def cmd_bandwidth(args) -> int:
    sample = Sample(_read_samples(Path(args.input)))
    report = select_bandwidth(sample, BandwidthMethod(args.method), tol=args.tol,
                              robust=args.robust, exact_limit=args.exact_limit)
    print_rich(f"[bold]n[/bold]              {sample.n}")
    print_rich(f"[bold]epsilon[/bold]        {report.epsilon:.10g}")
    print_rich(f"[bold]h1, h2[/bold]         {report.h1:.10g}, {report.h2:.10g}")
    print_rich(f"[bold]||u''||^2[/bold]      {report.curvature_norm:.10g}")
    print_rich(f"[bold]iterations[/bold]     {report.iterations}")
    print_rich(f"[bold]method[/bold]         {report.method.value}"
               + (" [yellow](fallback)[/yellow]" if report.fallback else ""))
    return 0


def cmd_eno_tables(args) -> int:
    tables = eno_tables(args.k, args.dx)
    for name, matrix in (("C", tables.C), ("D", tables.D), ("Dbar", tables.Dbar)):
        print_rich(f"[bold cyan]{name}[/bold cyan] ({matrix.shape[0]}x{matrix.shape[1]})")
        for r, row in enumerate(_format_rows(matrix)):
            print_rich(f"  r={r}: {row}")
    return 0


def cmd_validate(args) -> int:
    print_section_header("Validation")
    results = run_checks(full=not args.quick, quiet=not args.verbose)
    width = max(len(name) for name, _, _ in results)
    failures = 0
    for name, ok, detail in results:
        status = "[bold green]PASS[/bold green]" if ok else "[bold red]FAIL[/bold red]"
        failures += not ok
        print_rich(f"{status}  {name.ljust(width)}  [dim]{detail}[/dim]")
    print_rich(f"\n{len(results) - failures}/{len(results)} checks passed")
    return 1 if failures else 0


def cmd_list(args) -> int:
    loader = CaseLoader(args.cases) if args.cases else CaseLoader()
    for case_id in loader.available():
        deck = loader.load_deck(case_id)
        print_rich(f"[bold]{case_id}[/bold]  {deck.get('description', '')}")
        for scale in Scale:
            section = deck.get(scale.value) or {}
            if section:
                details = ", ".join(f"{k}={v}" for k, v in section.items())
                print_rich(f"    [dim]{scale.value}: T={deck.get('T')}, domain={deck.get('domain')}, {details}[/dim]")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="porous-lab",
                                     description="Particle and relaxation solvers for d_t u = 1/2 d_xx beta(u)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug output")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a test case and write CSVs")
    run.add_argument("--case", required=True, help="test case id (see 'list')")
    run.add_argument("--scale", choices=[s.value for s in Scale], default=Scale.DESK.value)
    run.add_argument("--methods", default=f"{Method.PARTICLE.value},{Method.RELAXATION.value}",
                     help="comma-separated subset of particle, relaxation, exact")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory")
    run.add_argument("--config", help="file of 'key = value' lines")
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help=f"override one key ({', '.join(OVERRIDE_KEYS)})")
    run.add_argument("--n-particles", type=int)
    run.add_argument("--bandwidth-stride", type=int)
    run.add_argument("--cases", help="directory of case decks")
    run.set_defaults(func=cmd_run)

    bandwidth = sub.add_parser("bandwidth", help="select a kernel bandwidth for a sample")
    bandwidth.add_argument("--input", required=True, help="CSV whose first column holds the sample")
    bandwidth.add_argument("--method", choices=[m.value for m in BandwidthMethod],
                           default=BandwidthMethod.SOLVE_THE_EQUATION.value)
    bandwidth.add_argument("--tol", type=float, default=1e-3)
    bandwidth.add_argument("--robust", action="store_true", help="use min(std, IQR/1.349) as spread")
    bandwidth.add_argument("--exact-limit", type=int, default=EXACT_PAIR_LIMIT,
                           help="largest n for exact pair sums")
    bandwidth.set_defaults(func=cmd_bandwidth)

    eno = sub.add_parser("eno-tables", help="print the ENO coefficient tables")
    eno.add_argument("--k", type=int, required=True)
    eno.add_argument("--dx", type=float, default=1.0)
    eno.set_defaults(func=cmd_eno_tables)

    validate = sub.add_parser("validate", help="run the acceptance checks")
    validate.add_argument("--quick", action="store_true",
                          help="skip the desk-scale particle runs")
    validate.set_defaults(func=cmd_validate)

    listing = sub.add_parser("list", help="list the test cases")
    listing.add_argument("--cases", help="directory of case decks")
    listing.set_defaults(func=cmd_list)
    return parser


def cli_main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    set_verbosity(0 if args.quiet else 2 if args.verbose else 1)
    try:
        return args.func(args)
    except LabError as e:
        log_error(str(e))
        return 2
    except KeyboardInterrupt:
        log_error("interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(cli_main())

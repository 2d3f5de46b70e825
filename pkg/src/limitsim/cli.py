"""Command-line entry point: run, sweep and compare scenarios.

Exit codes: 0 ok, 1 config error, 2 sweep infeasible, 3 I/O error,
4 internal invariant breach.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError, SimulationError
from .experiments import KNOBS, SweepInfeasible, compare, sweep
from .metrics import export
from .scenario import parse_scenario
from .simulator import run

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO, EXIT_INVARIANT = 0, 1, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="limitsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one scenario and write its report")
    r.add_argument("--scenario", required=True, help="scenario file, optionally FILE#variant")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, help="override the scenario seed")
    r.add_argument("--format", choices=("csv", "json"), default="csv")

    s = sub.add_parser("sweep", help="find the cheapest knob setting meeting an SLO-attainment target")
    s.add_argument("--scenario", required=True)
    s.add_argument("--knob", required=True, choices=KNOBS)
    s.add_argument("--grid", required=True, help="comma-separated ascending values")
    s.add_argument("--slo-target", required=True, type=float, help="attainment fraction, e.g. 0.99")
    s.add_argument("--deployment", help="deployment to tune (default: the first)")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1, help="grid points run in parallel")
    s.add_argument("--out", help="write sweep.csv here")

    c = sub.add_parser("compare", help="side-by-side metrics of two scenarios")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--out", required=True)
    return p


def _write_csv(path: Path, rows: list[dict], columns: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _print_table(rows: list[dict], columns: Sequence[str]) -> None:
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) if rows else len(c) for c in columns]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for r in rows:
        print("  ".join(str(r[c]).ljust(w) for c, w in zip(columns, widths)))


def _cmd_run(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = parse_scenario(args.scenario, overrides)
    report = run(cfg)
    export(report, args.format, args.out)
    rows = report.summary_rows()
    _print_table(rows, ("deployment", "replicas_final", "p99_ms", "slo_attainment", "creq_seconds", "throttle_events"))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    try:
        grid = [float(v) for v in args.grid.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --grid: {exc}") from exc
    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = parse_scenario(args.scenario, overrides)
    code = EXIT_OK
    try:
        rep = sweep(cfg, args.knob, grid, args.slo_target, args.deployment, args.jobs)
    except SweepInfeasible as exc:
        rep = exc.args[0]
        code = EXIT_INFEASIBLE
    rows = rep.rows()
    columns = ("value", "creq_seconds", "slo_attainment", "p99_ms", "meets")
    _print_table(rows, columns)
    if rep.best is not None:
        print(f"best {rep.knob} = {rep.best.value:g} ({rep.best.creq_seconds:.1f} creq-seconds)")
    else:
        print(f"no {rep.knob} value reaches attainment {rep.slo_target:g}", file=sys.stderr)
    if args.out:
        _write_csv(Path(args.out) / "sweep.csv", rows, columns)
    return code


def _cmd_compare(args) -> int:
    a = parse_scenario(args.a)
    b = parse_scenario(args.b)
    rows = compare(a, b)
    columns = ("deployment", "metric", "a", "b", "delta")
    _write_csv(Path(args.out) / "compare.csv", rows, columns)
    _print_table(rows, columns)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    handler = {"run": _cmd_run, "sweep": _cmd_sweep, "compare": _cmd_compare}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"internal invariant breach: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

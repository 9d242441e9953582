"""Command-line entry point: ``rmtlcomb analyze`` and ``rmtlcomb simulate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import simgen
from .report import DegenerateError, InputError, analyze, parse_dataset, write_figure_data

EXIT_OK, EXIT_INPUT, EXIT_DEGENERATE = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rmtlcomb", description="Two-group competing-risks comparisons.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="analyse a time,status,group CSV")
    a.add_argument("file", type=Path)
    a.add_argument("--tau", type=float, help="restriction horizon (default: data rule)")
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--perms", type=int, default=200, help="label permutations")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--jobs", type=int, default=1, help="worker threads")
    a.add_argument("--json", type=Path, metavar="OUT", help="also write the report as JSON")
    a.add_argument("--figure-data", type=Path, metavar="DIR", help="write CIF curves for plotting")

    s = sub.add_parser("simulate", help="Monte Carlo size and power")
    s.add_argument("--config", type=Path, help="key = value or JSON config file")
    s.add_argument("--scenario", choices=simgen.SCENARIOS)
    s.add_argument("--n1", type=int)
    s.add_argument("--n2", type=int)
    s.add_argument("--censoring", type=float, dest="target_censoring")
    s.add_argument("--reps", type=int, dest="replications")
    s.add_argument("--perms", type=int, dest="permutations")
    s.add_argument("--alpha", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--beta", type=float)
    s.add_argument("--extended", action="store_true", default=None, help="add DiffStar, RMSTi, RMSTc")
    s.add_argument("--grid", action="store_true", help="every size x censoring cell of the scenario")
    s.add_argument("--jobs", type=int, default=1, help="worker threads")
    s.add_argument("--out", type=Path, metavar="DIR", help="directory for TSV and JSON reports")
    return p


def _analyze(args) -> int:
    sample = parse_dataset(args.file)
    report = analyze(
        sample, args.tau, args.alpha, args.perms, args.seed, n_jobs=args.jobs, source=args.file.name
    )
    sys.stdout.write(report.to_text())
    if args.json:
        args.json.write_text(report.to_json() + "\n")
    if args.figure_data:
        write_figure_data(sample, args.figure_data)
    return EXIT_OK


_CONFIG_KEYS = (
    "scenario", "n1", "n2", "target_censoring", "replications", "permutations", "alpha", "seed", "beta", "extended",
)


def _config(args) -> simgen.ScenarioConfig:
    data = simgen.ScenarioConfig.from_file(args.config).to_dict() if args.config else {}
    for key in _CONFIG_KEYS:
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    if data.get("scenario", "A") != "B" and args.beta is None:
        data.pop("beta", None)
    return simgen.ScenarioConfig.from_dict(data)


def _simulate(args) -> int:
    try:
        config = _config(args)
    except (ValueError, TypeError) as exc:
        raise InputError(f"invalid config: {exc}") from None
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
    if args.grid:
        fixed = {k: v for k, v in config.to_dict().items() if k not in ("scenario", "n1", "n2", "target_censoring")}
        if config.scenario != "B":
            fixed.pop("beta")
        reports = simgen.run_grid(config.scenario, n_jobs=args.jobs, **fixed)
        table = simgen.format_grid(reports)
        sys.stdout.write(table)
        if args.out:
            (args.out / f"table_{config.scenario}.tsv").write_text(table)
            payload = [r.to_dict() for r in reports]
            (args.out / f"table_{config.scenario}.json").write_text(json.dumps(payload, indent=2) + "\n")
        return EXIT_OK
    report = simgen.run_monte_carlo(config, n_jobs=args.jobs)
    tsv = report.to_tsv()
    sys.stdout.write(tsv)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.out:
        stem = f"sim_{config.scenario}_{config.n1}_{config.n2}_{config.target_censoring:g}_seed{config.seed}"
        (args.out / f"{stem}.tsv").write_text(tsv)
        (args.out / f"{stem}.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "analyze":
            return _analyze(args)
        return _simulate(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DegenerateError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

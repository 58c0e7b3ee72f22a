"""Command-line entry point: simulate, verify, study and report."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from itoledger.calculus import LedgerError
from itoledger.config import (
    ConfigurationError,
    ExperimentConfig,
    default_config,
    load_config,
)
from itoledger.harness import (
    AXIS_SCENARIOS,
    STUDY_AXES,
    atomic_write,
    convergence_study,
    example1_deltas,
    example1_experiment,
    format_example1,
    format_summary,
    load_report,
    run_verification,
    simulate_scenario,
    write_example1_csv,
    write_study_csv,
)
from itoledger.lpfield import LpFieldError
from itoledger.process import ProcessError
from itoledger.scenarios import LP_SCENARIOS, SCENARIOS

PROG = "itoledger"
OUTPUT_ENV = "ITOLEDGER_OUTPUT"
DEFAULT_OUTPUT = Path("results")
DEFAULT_SCENARIO = "pure-jump-exact"

logger = logging.getLogger(__name__)


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        type=Path,
        help="YAML experiment file; built-in scenario defaults fill missing keys.",
    )
    common.add_argument(
        "--scenario",
        choices=sorted(SCENARIOS),
        help="Built-in scenario to run when no --config is given.",
    )
    common.add_argument(
        "--output",
        type=Path,
        help=f"Directory for CSV and JSON artifacts (default ${OUTPUT_ENV} or {DEFAULT_OUTPUT}).",
    )
    common.add_argument("--seed", type=int, help="Root seed for every random stream.")
    common.add_argument("--threads", type=int, help="Worker threads used for replicas.")

    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Simulate jump diffusions and verify Ito formulas term by term.",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Log progress (-v) or per-level detail (-vv).",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser(
        "simulate", parents=[common], help="Write path and jump stream CSVs for each replica."
    )
    commands.add_parser(
        "verify", parents=[common], help="Run a scenario's checks and write report.json."
    )
    lp_verify = commands.add_parser(
        "lp-verify", parents=[common], help="Verify the L_p field formula."
    )
    lp_verify.set_defaults(lp_only=True)

    example1 = commands.add_parser(
        "example1", parents=[common], help="Tabulate the counterexample integrals."
    )
    example1.add_argument("--t", type=float, default=1.0, help="Upper integration limit.")
    example1.add_argument(
        "--delta-levels", type=int, default=6, help="Number of lower limits delta_j."
    )
    example1.add_argument(
        "--delta-ratio", type=float, default=2.0, help="Ratio between consecutive deltas."
    )

    study = commands.add_parser(
        "study", parents=[common], help="Refine one discretization axis and fit its order."
    )
    study.add_argument("--axis", required=True, choices=STUDY_AXES)

    report = commands.add_parser("report", help="Print the summary of an existing report.json.")
    report.add_argument("path", type=Path)
    return parser.parse_args(argv)


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format=f"{PROG}: %(levelname)s: %(message)s")


def resolve_config(args: argparse.Namespace, fallback: str) -> ExperimentConfig:
    if args.config is not None:
        config = load_config(args.config)
        if args.scenario is not None and args.scenario != config.scenario:
            raise ConfigurationError(
                f"--scenario {args.scenario} conflicts with {args.config} ({config.scenario})"
            )
    else:
        config = default_config(args.scenario or fallback)
    return config.with_overrides(seed=args.seed, threads=args.threads)


def resolve_output(args: argparse.Namespace) -> Path:
    if args.output is not None:
        return args.output
    return Path(os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    configure_logging(args.verbose)
    try:
        return run_command(args)
    except ConfigurationError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    except (LedgerError, ProcessError, LpFieldError, OSError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1


def run_command(args: argparse.Namespace) -> int:
    if args.command == "report":
        data = load_report(args.path)
        print(format_summary(data))
        return 0 if data.get("passed") else 1

    if args.command == "study":
        config = resolve_config(args, AXIS_SCENARIOS[args.axis])
        output = resolve_output(args)
        result = convergence_study(config, args.axis)
        target = atomic_write(output / "study.csv", lambda temp: write_study_csv(result, temp))
        order = "indeterminate" if result.order is None else f"{result.order:.3f}"
        print(f"{PROG}: {args.axis} study: order {order}, status {result.status} -> {target}")
        return 0

    if args.command == "example1":
        config = resolve_config(args, "example1")
        output = resolve_output(args)
        deltas = example1_deltas(args.t, args.delta_ratio, args.delta_levels)
        table = example1_experiment(
            deltas, args.t, exponent=float(config.params.get("exponent", -0.25))
        )
        atomic_write(output / "example1.csv", lambda temp: write_example1_csv(table, temp))
        print(format_example1(table))
        return 0

    lp_only = getattr(args, "lp_only", False)
    config = resolve_config(args, LP_SCENARIOS[0] if lp_only else DEFAULT_SCENARIO)
    if lp_only and config.scenario not in LP_SCENARIOS:
        raise ConfigurationError(
            f"lp-verify runs {', '.join(LP_SCENARIOS)}, not {config.scenario}"
        )
    output = resolve_output(args)

    if args.command == "simulate":
        written = simulate_scenario(config, output)
        print(f"{PROG}: {config.scenario}: wrote {len(written)} files to {output}")
        return 0

    report = run_verification(config, output)
    print(format_summary(report.to_dict()))
    return 0 if report.passed else 1


if __name__ == "__main__":
    raise SystemExit(main())

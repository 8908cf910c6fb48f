"""
Command-line entry point.

    robot-navigation run SCENARIO [--setup budgeted|run-to-completion] [--seed N] [--trace/--no-trace] [--output-dir D]
    robot-navigation run-case DIRECTORY [--workers N] ...
    robot-navigation aggregate SUMMARY [SUMMARY ...]
    robot-navigation generate --case 1|2 --count N --seed S --output-dir D
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from robot_navigation_simulation.navigation_functions import NavigationExperiment, NoScenarioProvided
from robot_navigation_simulation.scenario_harness import CONTROLLERS, SETUPS, InvalidScenarioConfigError, aggregate
from robot_navigation_simulation.scenario_io import (
    ScenarioFileError,
    ScenarioSchemaError,
    generate_case_directory,
    load_summary,
)

logger = logging.getLogger(__name__)


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--setup", choices=SETUPS, help="override the setup stored in the scenario files")
    parser.add_argument("--seed", type=int, help="override the random seed stored in the scenario files")
    parser.add_argument("--controller", choices=CONTROLLERS, help="override the controller")
    parser.add_argument("--trace", action=argparse.BooleanOptionalAction, default=True, help="write per-step traces")
    parser.add_argument("--output-dir", type=Path, default=Path("results"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robot-navigation", description=__doc__.splitlines()[1])
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run one scenario file")
    run.add_argument("scenario", type=Path)
    _add_run_options(run)

    run_case = commands.add_parser("run-case", help="run every scenario file of a directory")
    run_case.add_argument("directory", type=Path)
    run_case.add_argument("--workers", type=int, default=1)
    _add_run_options(run_case)

    summarize = commands.add_parser("aggregate", help="aggregate summary files")
    summarize.add_argument("summaries", type=Path, nargs="+")

    generate = commands.add_parser("generate", help="write reconstructed scenario files")
    generate.add_argument("--case", type=int, choices=[1, 2], required=True)
    generate.add_argument("--count", type=int, default=10)
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--output-dir", type=Path, required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s - %(levelname)s - %(message)s")

    if args.command == "generate":
        for path in generate_case_directory(args.case, args.count, args.seed, args.output_dir):
            print(path)
        return 0
    if args.command == "aggregate":
        print(aggregate(load_summary(args.summaries)).to_string())
        return 0

    if args.command == "run":
        paths = [args.scenario]
    else:
        paths = sorted(args.directory.glob("*.json"))
    experiment = NavigationExperiment(paths, args.output_dir)
    try:
        if args.command == "run":
            experiment.run_single(setup=args.setup, seed=args.seed, controller=args.controller)
            if not args.trace:
                experiment.results = [(metrics, None) for metrics, _ in experiment.results]
        else:
            experiment.run_all(args.setup, args.seed, args.controller, workers=args.workers, keep_traces=args.trace)
    except (ScenarioFileError, ScenarioSchemaError, InvalidScenarioConfigError, NoScenarioProvided) as error:
        logger.error("%s", error)
        return 2
    summary = experiment.write_results()
    print(experiment.aggregate_results().to_string())
    logger.info("Summary written to %s", summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points.

``llsim simulate --config FILE [--seed U64] [--out DIR]`` runs one
configuration (honoring ``run.replicas``); ``llsim experiment
{finite-size|rng-quality|tolerance-sweep} [--config FILE] [--out DIR]``
runs a preset study.  Exit codes: 0 success, 2 configuration error,
3 numeric or clearance failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .errors import EXIT_OK, LlsError, exit_code_for
from .harness import (
    EXPERIMENTS,
    SimulationConfig,
    parse_config,
    run_with_replicas,
)


def _load_config(path: str | None) -> SimulationConfig:
    if path is None:
        return parse_config("")
    return parse_config(Path(path).read_text())


def _cmd_simulate(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.out is not None:
        config = dataclasses.replace(config, output_dir=Path(args.out))
    outputs = run_with_replicas(config)
    for output in outputs:
        meta = output.metadata
        print(
            f"run seed={meta.seed} algorithm={meta.algorithm} "
            f"steps={meta.steps_completed} final_price="
            f"{output.summary['final_price']:.6g}"
        )
    if config.output_dir is not None:
        print(f"outputs written to {config.output_dir}")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    config = _load_config(args.config)
    if args.out is not None:
        config = dataclasses.replace(config, output_dir=Path(args.out))
    report = EXPERIMENTS[args.name](config)
    print(report.to_text(), end="")
    if config.output_dir is not None:
        print(f"outputs written to {config.output_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="llsim",
        description="Agent-based stock market simulator (LLS model)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one configuration")
    sim.add_argument("--config", help="config file (key = value lines)")
    sim.add_argument("--seed", type=int, help="override rng.seed")
    sim.add_argument("--out", help="output directory")
    sim.set_defaults(func=_cmd_simulate)

    exp = sub.add_parser("experiment", help="run a preset study")
    exp.add_argument("name", choices=sorted(EXPERIMENTS))
    exp.add_argument("--config", help="config file (key = value lines)")
    exp.add_argument("--out", help="output directory")
    exp.set_defaults(func=_cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LlsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``fitflow <subcommand> [--config FILE] [--set k=v ...]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

from ..errors import ConfigError, FitflowError
from .config import PROFILES, build_config
from .pipeline import Pipeline
from .report import metric_table

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON run config; sections not given keep their defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. sampler.K=40 (repeatable)")
    p.add_argument("--seed", type=int, help="evaluate a single seed instead of the configured list")
    p.add_argument("--out", help="run directory (default: config 'out', then $FITFLOW_OUT, then runs/default)")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk", help="base defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _stage_runner(stage: str):
    def run(pipe: Pipeline, args) -> int:
        getattr(pipe, stage)()
        print(f"{stage.replace('_', '-')}: done -> {pipe.out}")
        return EXIT_OK

    return run


def _evaluate(pipe: Pipeline, args) -> int:
    report = pipe.evaluate()
    print(metric_table(report))
    return EXIT_OK


def _report(pipe: Pipeline, args) -> int:
    for path in pipe.report():
        print(path)
    return EXIT_OK


def _run(pipe: Pipeline, args) -> int:
    report = pipe.run(figures=not args.no_figures)
    print(metric_table(report))
    return EXIT_OK


COMMANDS = {
    "landscape-gen": ("generate and store the synthetic landscape", _stage_runner("landscape_gen")),
    "benchmark-build": ("build the restricted training subset", _stage_runner("benchmark_build")),
    "train-codec": ("train the sequence codec", _stage_runner("train_codec")),
    "train-flow": ("train the flow model and the ranking predictor", _stage_runner("train_flow")),
    "sample": ("calibrate targets and draw samples per seed", _stage_runner("sample")),
    "bootstrap": ("augment with guided samples and retrain the flow model", _stage_runner("bootstrap")),
    "evaluate": ("score the selected samples with the oracle and write report.json", _evaluate),
    "report": ("write chart.csv and figures from report.json", _report),
    "run": ("run every stage in order", _run),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fitflow", description="Fitness-conditioned latent flow matching on synthetic landscapes.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    common = _common()
    for name, (help_text, _) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, parents=[common])
        if name == "run":
            sp.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args.config, args.overrides, args.seed, args.out, args.profile)
    except FileNotFoundError as exc:
        print(f"fitflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"fitflow: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        pipe = Pipeline(cfg)
        return COMMANDS[args.command][1](pipe, args)
    except ConfigError as exc:
        print(f"fitflow {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FitflowError, OSError) as exc:
        print(f"fitflow {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command line surface: `run`, `sweep` and `--catalog`.

`main` returns the process exit code instead of exiting, so tests can call it
directly with an argv list.
"""
from __future__ import annotations

import argparse
from pathlib import Path
import sys
from typing import List, Optional

from src.lqtrack.config import EngineConfig
from src.lqtrack.errors import EXIT_OK, EXIT_UNEXPECTED, EngineError
from src.lqtrack.logger import get_logger

_logger = get_logger("cli")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lqtrack", description="Stochastic LQ tracking engine on scenario trees")
    parser.add_argument("--debug", action="store_true")
    parser.add_argument("--out", type=Path, default=None, help="output directory (overrides the scenario's)")
    parser.add_argument("--threads", type=int, default=None, help="worker threads for sweeps")
    parser.add_argument("--catalog", action="store_true", help="list the built-in scenarios and exit")
    sub = parser.add_subparsers(dest="command")

    run = sub.add_parser("run", help="run one scenario and write its artifacts")
    run.add_argument("config", help="scenario file or catalog name")

    sweep = sub.add_parser("sweep", help="re-run a scenario across one axis")
    sweep.add_argument("config", help="scenario file or catalog name")
    sweep.add_argument("--axis", choices=["n", "N", "perturbation"], required=True)
    return parser


def print_catalog() -> None:
    from src.lqtrack.data.loader import list_catalog

    for name, description in list_catalog():
        print(f"{name:32s} {description}")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.catalog:
        print_catalog()
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_UNEXPECTED

    try:
        # deferred: numpy and scipy load only once a command runs
        from src.lqtrack.app import Engine

        settings = EngineConfig.from_env(threads=args.threads)
        engine = Engine(settings, debug=args.debug)
        if args.command == "run":
            report = engine.run(args.config, out_dir=args.out)
            return report.exit_code
        engine.sweep(args.config, args.axis, out_dir=args.out)
        return EXIT_OK
    except EngineError as e:
        _logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except Exception as e:
        _logger.exception("Unexpected failure: %s", e)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())

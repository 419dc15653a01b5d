#!/usr/bin/env python3
"""
Vehicle placement toolkit - command-line entry point.

    python main.py synth    --config run.json --out out/
    python main.py fractal  --config run.json --out out/
    python main.py simulate --config run.json --out out/ --algo ftl_ch --algo opt
    python main.py report   --out out/
    python main.py init-config run.json
"""

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from api.commands import cmd_fractal, cmd_init_config, cmd_report, cmd_simulate, cmd_synth
from config.settings import ConfigManager
from utils.logging_config import ErrorHandler, setup_default_logging

logger = logging.getLogger(__name__)

COMMANDS = {
    "synth": cmd_synth,
    "fractal": cmd_fractal,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py",
                                     description="Vehicle placement simulator and fractal analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, handler in COMMANDS.items():
        p = sub.add_parser(name, help=handler.__doc__)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--input", help="request stream (csv or jsonl)")
        p.add_argument("--algo", action="append", default=None,
                       help="algorithm to run (repeatable)")
        p.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")

    p = sub.add_parser("init-config", help="write a default config file")
    p.add_argument("path")
    p.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "seed": args.seed,
        "out_dir": args.out,
        "input": args.input,
        "logging.log_level": args.log_level,
    }


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one subcommand and return the exit status."""
    args = build_parser().parse_args(argv)
    setup_default_logging(log_level=args.log_level)
    try:
        if args.command == "init-config":
            cmd_init_config(args.path)
            return 0

        manager = ConfigManager(config_file=args.config, overrides=_overrides(args),
                                algorithms=args.algo)
        settings = manager.settings
        setup_default_logging(log_dir=settings.logging.log_dir, **manager.get_logging_config())
        for issue in manager.validate_config():
            logger.warning(f"Configuration issue: {issue}")

        COMMANDS[args.command](settings)
        return 0
    except Exception as e:
        payload = ErrorHandler.handle_command_error(args.command, e)
        print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)
        return ErrorHandler.exit_status(e)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

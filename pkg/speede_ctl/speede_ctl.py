#!/usr/bin/env python3
"""Speede control commandline client"""
from __future__ import annotations

import sys

from .general.general import (
    EXIT_FAILURE,
    EXIT_OK,
    EXIT_USAGE,
    LOGGER,
    SPEEDE_CTL_VERSION,
    ConfigurationError,
    SpeedeError,
    set_debug,
)
from .general.parameters import get_parser
from .pipeline import COMMANDS, resolve_config


def run(args_in: list[str] | None = None) -> int:
    """Parse the arguments, run one subcommand and return its exit code."""

    if args_in is None:
        args_in = sys.argv[1:]

    parser = get_parser()
    args_parsed = parser.parse_args(args=args_in)

    if args_parsed.version:
        print(SPEEDE_CTL_VERSION)
        return EXIT_OK

    if not args_parsed.command:
        parser.print_help()
        return EXIT_USAGE

    set_debug(args_parsed.debug)

    try:
        cfg = resolve_config(args_parsed)
        return COMMANDS[args_parsed.command](cfg, args_parsed)
    except ConfigurationError as e:
        LOGGER.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except (SpeedeError, OSError) as e:
        LOGGER.error(f"{args_parsed.command} failed: {e}")
        return EXIT_FAILURE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

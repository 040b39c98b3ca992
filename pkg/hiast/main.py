"""Command-line entry point for the HIAST self-training toolkit."""

import argparse
import logging
import sys

from hiast import __version__
from hiast.commands import pseudolabel, sweep, synth, training
from hiast.config import settings
from hiast.exceptions import ConfigError, HiastError, UsageError

logger = logging.getLogger("hiast.main")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so cli_main owns the exit code."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ── Parser ────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hiast", description="Hard-aware instance-adaptive self-training on synthetic data")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", help=f"default: {settings.log_level}")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth.register(subparsers)
    training.register(subparsers)
    pseudolabel.register(subparsers)
    sweep.register(subparsers)
    return parser


# ── Logging ───────────────────────────────────────────────────────────

def configure_logging(level: str | None = None) -> None:
    level = (level or settings.log_level).upper()
    logging.basicConfig(level=level, format=settings.log_format)
    logging.getLogger().setLevel(level)


# ── Entry point ───────────────────────────────────────────────────────

def cli_main(argv: list[str] | None = None) -> int:
    """Run one subcommand; returns 0 on success, 1 on usage/config errors, 2 on runtime errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help / --version
        return e.code if isinstance(e.code, int) else EXIT_OK

    configure_logging(args.log_level)
    logger.info(f"🚀 hiast {args.command}")
    try:
        args.handler(args)
    except (UsageError, ConfigError) as e:
        logger.error(f"❌ {e}")
        return EXIT_USAGE
    except HiastError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_RUNTIME
    except (OSError, ValueError) as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()

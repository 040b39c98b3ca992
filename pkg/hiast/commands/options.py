"""Flags shared by several subcommands and their mapping onto ExperimentConfig."""

import argparse
import logging
from pathlib import Path

from hiast import presets
from hiast.config import load_experiment_config, settings
from hiast.exceptions import ConfigError
from hiast.schemas import ExperimentConfig
from hiast.services.sweep import apply_override, with_seed

logger = logging.getLogger(__name__)


def parse_list(text: str, cast=float) -> list:
    """``"0.1,0.3"`` -> ``[0.1, 0.3]``."""
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not a comma-separated list: {text!r}") from e


def add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--preset", choices=sorted(presets.PRESETS), help="named experiment applied on top of the config")
    parser.add_argument("--seed", type=int, help="seed for data and training streams")
    parser.add_argument("--rounds", type=int)
    parser.add_argument("--iterations", type=int, help="iterations per round")
    parser.add_argument("--warmup-iterations", type=int)
    parser.add_argument("--source", help="source dataset directory (default: synthesize)")
    parser.add_argument("--target", help="target dataset directory (default: synthesize)")


def add_output_option(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", help=f"output directory (default: {settings.output_dir}/<command>)")


def output_dir(args: argparse.Namespace) -> Path:
    return Path(args.out) if args.out else Path(settings.output_dir) / args.command


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or defaults) with CLI overrides applied; logged at INFO."""
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "preset", None):
        cfg = presets.PRESETS[args.preset](cfg)

    seed = args.seed
    if seed is None and not args.config:
        seed = settings.default_seed
    if seed is not None:
        cfg = with_seed(cfg, seed)

    update = {}
    if args.rounds is not None:
        update["rounds"] = args.rounds
    if args.iterations is not None:
        update["iterations_per_round"] = args.iterations
    if args.warmup_iterations is not None:
        update["warmup_iterations"] = args.warmup_iterations
    if args.source or args.target:
        update["source_dir"] = args.source
        update["target_dir"] = args.target
    if update:
        try:
            cfg = ExperimentConfig.model_validate(cfg.model_dump() | update)
        except ValueError as e:
            raise ConfigError(f"invalid command-line override: {e}") from e

    for param in ("alpha", "beta", "gamma"):
        value = getattr(args, param, None)
        if value is not None:
            cfg = _override(cfg, param, value)

    logger.info(f"Resolved config (seed={cfg.seed}): {cfg.model_dump_json()}")
    return cfg


def _override(cfg: ExperimentConfig, param: str, value: float) -> ExperimentConfig:
    try:
        return apply_override(cfg, param, value)
    except ValueError as e:
        raise ConfigError(f"invalid --{param} {value}: {e}") from e

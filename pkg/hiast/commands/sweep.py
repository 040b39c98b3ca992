"""``sweep``, ``report`` and ``compare-selectors`` subcommands."""

import argparse
import logging

from hiast import presets
from hiast.commands.options import (
    add_config_options,
    add_output_option,
    output_dir,
    parse_list,
    resolve_config,
)
from hiast.config import settings
from hiast.exceptions import ConfigError
from hiast.schemas import SweepSpec
from hiast.services.sweep import (
    DEFAULT_MATCHED_PROPORTION,
    compare_selectors,
    run_ablation,
    run_sweep,
    summarize,
)
from hiast.storage import emit_csv

logger = logging.getLogger(__name__)

SWEEP_PARAMS = ("alpha", "gamma", "beta", "k", "lambda_i", "lambda_c", "lambda_cst")


def register(subparsers) -> None:
    sweep = subparsers.add_parser("sweep", help="one-parameter sweep or ablation table")
    add_config_options(sweep)
    add_output_option(sweep)
    mode = sweep.add_mutually_exclusive_group(required=True)
    mode.add_argument("--param", choices=SWEEP_PARAMS)
    mode.add_argument("--ablation", choices=("ladder", "switch-off"))
    sweep.add_argument("--values", type=parse_list, help="comma-separated values (default: default grid)")
    sweep.add_argument("--seeds", type=lambda s: parse_list(s, int), default=[0])
    sweep.add_argument("--workers", type=int, default=settings.sweep_workers)
    sweep.set_defaults(handler=run_sweep_command)

    report = subparsers.add_parser("report", help="median/mean final mIoU per group")
    report.add_argument("inputs", nargs="+", help="sweep.csv, ablation.csv or metrics.csv files")
    add_output_option(report)
    report.set_defaults(handler=run_report)

    selectors = subparsers.add_parser("compare-selectors",
                                      help="IAS vs constant threshold at matched proportion")
    add_config_options(selectors)
    add_output_option(selectors)
    selectors.add_argument("--alpha", type=float, help="fixed IAS alpha (disables proportion matching)")
    selectors.add_argument("--proportion", type=float, default=DEFAULT_MATCHED_PROPORTION,
                           help="share of pixels IAS is tuned to select (default: %(default)s)")
    selectors.add_argument("--gamma", type=float)
    selectors.add_argument("--seeds", type=lambda s: parse_list(s, int), default=[0, 1, 2, 3, 4])
    selectors.set_defaults(handler=run_compare_selectors)


def run_sweep_command(args: argparse.Namespace) -> None:
    base = resolve_config(args)
    out = output_dir(args)
    if args.ablation:
        rows = run_ablation(base, args.ablation, args.seeds, out, workers=args.workers)
        logger.info(f"✅ Ablation '{args.ablation}': {len(rows)} runs -> {out / 'ablation.csv'}")
        return

    values = args.values
    if values is None:
        try:
            values = presets.sensitivity_grid(args.param, base.synth.num_classes)
        except KeyError as e:
            raise ConfigError(f"--values is required for --param {args.param}") from e
    try:
        spec = SweepSpec(param=args.param, values=values, base=base, seeds=args.seeds)
    except ValueError as e:
        raise ConfigError(f"invalid sweep: {e}") from e
    rows = run_sweep(spec, out, workers=args.workers)
    logger.info(f"✅ Sweep over {args.param}: {len(rows)} runs -> {out / 'sweep.csv'}")


def run_report(args: argparse.Namespace) -> None:
    rows = summarize(args.inputs)
    out = output_dir(args)
    emit_csv(rows, out / "summary.csv", ["group", "n", "median_final_miou", "mean_final_miou"])
    for row in rows:
        logger.info(f"📊 {row['group']}: median={row['median_final_miou']:.4f} "
                    f"mean={row['mean_final_miou']:.4f} (n={row['n']})")


def run_compare_selectors(args: argparse.Namespace) -> None:
    base = resolve_config(args)
    out = output_dir(args)
    if not 0.0 < args.proportion <= 1.0:
        raise ConfigError(f"--proportion must be in (0, 1], got {args.proportion}")
    target = None if args.alpha is not None else args.proportion
    rows = compare_selectors(base, args.seeds, out, target_proportion=target)
    wins = sum(r["ias_diversity"] > r["constant_diversity"] for r in rows)
    logger.info(f"✅ IAS selected more classes on {wins}/{len(rows)} seeds -> {out / 'selectors.csv'}")

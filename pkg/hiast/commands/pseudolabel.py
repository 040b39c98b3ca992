"""``pseudolabel``: label the target set once with a chosen selector."""

import argparse
import logging

import numpy as np

from hiast.commands.options import add_config_options, add_output_option, output_dir, resolve_config
from hiast.services.pipeline import initial_state, load_datasets, load_model_params, predict_probmaps
from hiast.services.pseudo_labeler import (
    ThresholdState,
    apply_thresholds,
    class_proportion_ratios,
    classbalanced_thresholds,
    generate_pseudo_labels_constant,
    generate_pseudo_labels_ias,
    selection_stats,
    write_pseudo_labels,
)
from hiast.storage import write_json

logger = logging.getLogger(__name__)

STRATEGIES = ("ias", "constant", "classbalanced")


def register(subparsers) -> None:
    parser = subparsers.add_parser("pseudolabel", help="generate pseudo-labels for the target set")
    add_config_options(parser)
    add_output_option(parser)
    parser.add_argument("--strategy", choices=STRATEGIES, default="ias")
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--threshold", type=float, help="constant threshold (strategy=constant)")
    parser.add_argument("--checkpoint", help="generator checkpoint (default: warm up inline)")
    parser.add_argument("--pgm", action="store_true", help="also dump PGM images")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    source, target = load_datasets(cfg)
    if args.checkpoint:
        generator = load_model_params(args.checkpoint)
    else:
        generator = initial_state(cfg, source, target).teacher

    probmaps = predict_probmaps(generator, target)
    c = target.meta.num_classes

    if args.strategy == "ias":
        labels, state = generate_pseudo_labels_ias(
            probmaps, cfg.ias, trace=True, num_classes=c, instance_ids=target.ids
        )
    else:
        if args.strategy == "constant":
            theta_const = cfg.constant_threshold if args.threshold is None else args.threshold
            labels = generate_pseudo_labels_constant(probmaps, theta_const)
            theta = np.full(c, theta_const)
        else:
            theta = classbalanced_thresholds(probmaps, cfg.ias.alpha, num_classes=c)
            labels = apply_thresholds(probmaps, theta)
        # one pooled row in thresholds.csv
        state = ThresholdState(theta, 0, [("all", theta)])

    reference = [s.labels for s in target] if target.is_labeled else None
    stats = selection_stats(labels, reference, num_classes=c)
    out = output_dir(args)
    write_pseudo_labels(out, target.ids, labels, state, stats,
                        dump_pgm=args.pgm or cfg.dump_pgm, num_classes=c)

    if args.strategy == "ias":
        # How much gamma widens each class relative to the unweighted selector.
        base_params = cfg.ias.model_copy(update={"gamma": 0.0})
        base_labels, _ = generate_pseudo_labels_ias(probmaps, base_params, num_classes=c)
        baseline = selection_stats(base_labels, reference, num_classes=c)
        write_json(out / "proportion_ratios.json", {
            "baseline": {"gamma": 0.0, "alpha": cfg.ias.alpha, "beta": cfg.ias.beta},
            "ratios": class_proportion_ratios(stats, baseline),
        })
    logger.info(f"✅ {args.strategy}: selected {stats.proportion:.3f} of pixels, {stats.diversity} classes")

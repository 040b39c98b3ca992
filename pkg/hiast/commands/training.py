"""``warmup``, ``train`` and ``eval`` subcommands."""

import argparse
import logging
from pathlib import Path

from hiast.commands.options import (
    add_config_options,
    add_output_option,
    output_dir,
    resolve_config,
)
from hiast.services.pipeline import (
    evaluate_params,
    initial_state,
    load_datasets,
    load_model_params,
    run_self_training,
    save_round_checkpoint,
)
from hiast.storage import load_dataset, write_json

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    warmup = subparsers.add_parser("warmup", help="source-only warm-up; writes a round-0 checkpoint")
    add_config_options(warmup)
    add_output_option(warmup)
    warmup.set_defaults(handler=run_warmup)

    train = subparsers.add_parser("train", help="warm-up plus all self-training rounds")
    add_config_options(train)
    add_output_option(train)
    train.add_argument("--alpha", type=float)
    train.add_argument("--beta", type=float)
    train.add_argument("--gamma", type=float)
    train.add_argument("--resume", help="round checkpoint to continue from")
    train.set_defaults(handler=run_train)

    evaluate = subparsers.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data", required=True, help="dataset directory")
    evaluate.add_argument("--student", action="store_true", help="evaluate the student weights")
    add_output_option(evaluate)
    evaluate.set_defaults(handler=run_eval)


def run_warmup(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    out = output_dir(args)
    source, target = load_datasets(cfg)
    state = initial_state(cfg.model_copy(update={"init_checkpoint": None}), source, target)
    save_round_checkpoint(out / "checkpoint", state)
    write_json(out / "config.json", cfg.model_dump())
    write_json(out / "warmup.json", {
        "target_miou": state.metrics[0].miou,
        "source_miou": state.source_warmup_miou,
        "per_class_iou": state.metrics[0].per_class_iou,
    })
    logger.info(f"✅ Warm-up checkpoint written to {out / 'checkpoint'}")


def run_train(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    out = output_dir(args)
    report = run_self_training(cfg, out, resume_from=args.resume)
    logger.info(
        f"✅ Training finished: warm-up mIoU {report.warmup_miou:.4f} -> "
        f"final mIoU {report.final_miou:.4f} ({out})"
    )


def run_eval(args: argparse.Namespace) -> None:
    params = load_model_params(args.checkpoint, "student" if args.student else "teacher")
    ds = load_dataset(args.data)
    score, per_class = evaluate_params(params, ds)
    out = output_dir(args)
    write_json(out / "eval.json", {
        "checkpoint": str(Path(args.checkpoint)),
        "data": str(Path(args.data)),
        "weights": "student" if args.student else "teacher",
        "miou": score,
        "per_class_iou": per_class,
    })
    logger.info(f"📊 mIoU={score:.4f} on {args.data}")

"""``synth``: write a synthetic source/target pair to disk."""

import argparse
import logging

from hiast.commands.options import add_config_options, add_output_option, output_dir, resolve_config
from hiast.services.synthetic import make_synthetic_pair
from hiast.storage import save_dataset

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("synth", help="generate a shifted synthetic dataset pair")
    add_config_options(parser)
    add_output_option(parser)
    parser.add_argument("--num-classes", type=int)
    parser.add_argument("--images", type=int, help="images per domain")
    parser.add_argument("--height", type=int)
    parser.add_argument("--width", type=int)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    update = {
        key: value
        for key, value in (
            ("num_classes", args.num_classes),
            ("images_per_domain", args.images),
            ("height", args.height),
            ("width", args.width),
        )
        if value is not None
    }
    synth_cfg = cfg.synth.model_dump() | update

    out = output_dir(args)
    source, target = make_synthetic_pair(synth_cfg)
    save_dataset(source, out / "source")
    save_dataset(target, out / "target")
    logger.info(f"✅ Wrote {len(source)} source and {len(target)} target images to {out}")

import argparse
import logging
import logging.config
import os
import sys

from refseg import experiment
from refseg.conf import ImproperlyConfigured, settings
from refseg.data import ManifestError, load_manifest, split_labeled
from refseg.metrics import ShapeMismatch
from refseg.segmenter import TrainingDiverged, load_segmenter
from refseg.storage import CheckpointError
from refseg.templatebank import DuplicateTemplate, RetrievalError
from refseg.utils import set_num_threads


logger = logging.getLogger(__name__)


DOMAIN_ERRORS = (
    CheckpointError,
    DuplicateTemplate,
    ImproperlyConfigured,
    ManifestError,
    RetrievalError,
    ShapeMismatch,
    TrainingDiverged,
)


def _overrides(args):
    overrides = {
        "seed": getattr(args, "seed", None),
        "ratio": getattr(args, "ratio", None),
        "out": getattr(args, "out", None),
        "data": getattr(args, "data", None),
        "pretrain.steps": getattr(args, "steps", None),
        "ssl.iterations": getattr(args, "iters", None),
        "corpus.patients": getattr(args, "patients", None),
        "corpus.slices": getattr(args, "slices", None),
        "corpus.classes": getattr(args, "classes", None),
        "corpus.size": getattr(args, "size", None),
    }
    for name in ("prompt", "memory", "feedback", "assistant"):
        if getattr(args, f"no_{name}", False):
            overrides[f"use_{name}"] = False
    return overrides


def cmd_generate(args, config):
    root = args.out or config.data
    manifest = experiment.run_generate(config, root=root)
    logger.info(f"Corpus ready at {manifest.root}")


def cmd_pretrain(args, config):
    experiment.run_pretrain(config)


def cmd_ssl_train(args, config):
    segmenter = None
    if config.use_assistant:
        if not args.segmenter:
            raise ImproperlyConfigured(
                "ssl-train needs --segmenter unless --no-assistant is given"
            )
        segmenter, _ = load_segmenter(args.segmenter)
    manifest = load_manifest(config.data)
    if args.ratio is not None:
        manifest = split_labeled(manifest, config.ratio, config.seed)
    experiment.run_ssl(config, segmenter, manifest)


def cmd_infer(args, config):
    experiment.run_infer(
        config, args.checkpoint, split=args.split, overlays=args.overlays
    )


def cmd_eval(args, config):
    if not args.checkpoint and not args.predictions:
        raise ImproperlyConfigured("eval needs --checkpoint or --predictions")
    report = experiment.run_eval(
        config,
        checkpoint=args.checkpoint,
        predictions=args.predictions,
        split=args.split,
    )
    logger.info(f"Mean dice {report.mean_dice:.4f}")


def cmd_ablate(args, config):
    rows = experiment.run_ablation(config, with_baselines=args.with_baselines)
    logger.info(f"Worst variant: {experiment.worst_variant(rows)}")


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "ssl-train": cmd_ssl_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset root or manifest")

    parser = argparse.ArgumentParser(
        prog="refseg",
        description="Reference-guided semi-supervised segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", parents=[common])
    generate.add_argument("--ratio", type=float)
    generate.add_argument("--patients", type=int)
    generate.add_argument("--slices", type=int)
    generate.add_argument("--classes", type=int)
    generate.add_argument("--size", type=int)

    pretrain = sub.add_parser("pretrain", parents=[common])
    pretrain.add_argument("--steps", type=int)
    pretrain.add_argument("--no-prompt", action="store_true")
    pretrain.add_argument("--no-memory", action="store_true")

    ssl = sub.add_parser("ssl-train", parents=[common])
    ssl.add_argument("--segmenter", help="pretrained segmenter checkpoint")
    ssl.add_argument("--ratio", type=float)
    ssl.add_argument("--iters", type=int)
    ssl.add_argument("--no-feedback", action="store_true")
    ssl.add_argument("--no-assistant", action="store_true")

    infer = sub.add_parser("infer", parents=[common])
    infer.add_argument("--checkpoint", required=True)
    infer.add_argument("--split", default="test")
    infer.add_argument("--overlays", action="store_true")

    evaluate = sub.add_parser("eval", parents=[common])
    evaluate.add_argument("--checkpoint")
    evaluate.add_argument("--predictions", help="directory of predicted masks")
    evaluate.add_argument("--split", default="test")

    ablate = sub.add_parser("ablate", parents=[common])
    ablate.add_argument("--ratio", type=float)
    ablate.add_argument("--steps", type=int)
    ablate.add_argument("--iters", type=int)
    ablate.add_argument("--with-baselines", action="store_true")
    return parser


def main(argv=None):
    logging.config.dictConfig(settings.LOGGING_CONFIG)
    set_num_threads(settings.NUM_THREADS)
    args = build_parser().parse_args(argv)
    try:
        config = experiment.load_config(args.config, _overrides(args))
        if args.command != "generate":
            os.makedirs(config.out, exist_ok=True)
        COMMANDS[args.command](args, config)
    except DOMAIN_ERRORS as e:
        logger.error(e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

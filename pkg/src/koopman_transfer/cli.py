"""Command-line entry point: one subcommand per pipeline stage."""

import argparse
from dataclasses import replace
import logging
import os
import sys

from . import pipeline
from .config import BACKBONES, VARIANTS, backbone_of, load_config, preset_config
from .errors import ConfigInvalid, MissingPrerequisite, NonFiniteLoss, NotConverged, StepSizeUnderflow

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("simulate", "train-ae", "pretrain", "compute-safety", "finetune", "evaluate", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser():
    parser = _Parser(prog="koopman-transfer", description="Run one stage of the Koopman transfer study.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON file overlaid on the preset")
    parser.add_argument("--preset", choices=("desk", "paper"), default=None)
    parser.add_argument("--variant", choices=VARIANTS, default=None, help="limit pretrain/finetune/evaluate/report")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--out", default=None, help="output root (run goes to OUT/<name>)")
    parser.add_argument("--name", default=None, help="run name; defaults to the preset name")
    parser.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args, environ=os.environ):
    base = preset_config(args.preset or "desk")
    cfg = load_config(args.config, base) if args.config else base
    if args.preset and args.config and cfg.preset != args.preset:
        raise ConfigInvalid("preset", f"--preset {args.preset} conflicts with config preset {cfg.preset}")
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if environ.get("KOOPMAN_TRANSFER_OUT"):
        changes["out_dir"] = environ["KOOPMAN_TRANSFER_OUT"]
    if environ.get("KOOPMAN_TRANSFER_THREADS"):
        try:
            changes["threads"] = int(environ["KOOPMAN_TRANSFER_THREADS"])
        except ValueError:
            raise ConfigInvalid("KOOPMAN_TRANSFER_THREADS", "must be an integer") from None
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.name is not None:
        changes["name"] = args.name
    cfg = replace(cfg, **changes)
    if cfg.threads < 1:
        raise ConfigInvalid("threads", "must be at least 1")
    return cfg


def dispatch(command, cfg, variant=None):
    run = pipeline.Run(cfg)
    variants = (variant,) if variant else VARIANTS
    if command == "simulate":
        pipeline.simulate(run)
    elif command == "train-ae":
        pipeline.train_ae(run)
    elif command == "pretrain":
        backbones = (backbone_of(variant),) if variant else BACKBONES
        for b in backbones:
            pipeline.pretrain_backbone(run, b)
    elif command == "compute-safety":
        pipeline.compute_safety_stage(run)
    elif command == "finetune":
        for v in variants:
            pipeline.finetune_variant(run, v)
    elif command == "evaluate":
        pipeline.evaluate(run, variants)
    elif command == "report":
        pipeline.report(run, variants)
    return run


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            sys.stdout.write(cfg.to_json())
            return EXIT_OK
        dispatch(args.command, cfg, args.variant)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(exc, file=sys.stderr)
        return EXIT_MISSING
    except (NonFiniteLoss, NotConverged, StepSizeUnderflow) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

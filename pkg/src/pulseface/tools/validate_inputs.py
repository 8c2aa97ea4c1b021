import argparse
import os

from pulseface.errors import PulsefaceError
from pulseface.tools.config import load_config
from pulseface.tools.log import log

_STAGE = "Setup"


def validate_args(args: argparse.Namespace, parser: argparse.ArgumentParser):
    if args.config:
        args.config = os.path.normpath(args.config)
        if not os.path.isfile(args.config):
            parser.error(f"Config file does not exist: {args.config}")
        log(_STAGE, f"Using config: {args.config}")

    if args.threads is not None and args.threads < 1:
        parser.error(f"--threads must be >= 1, got {args.threads}")
    if args.seed is not None and args.seed < 0:
        parser.error(f"--seed must be non-negative, got {args.seed}")

    try:
        config = load_config(args.config)
    except PulsefaceError as exc:
        parser.error(f"Invalid config: {exc}")

    if args.out is not None:
        args.out = os.path.normpath(args.out)
    config = config.with_overrides(out=args.out, seed=args.seed, threads=args.threads)

    # Build the run directory: default is runs/default relative to the working directory
    os.makedirs(config.run.out, exist_ok=True)
    log(_STAGE, f"Run directory: {config.run.out}")

    args.pipeline_config = config
    return args

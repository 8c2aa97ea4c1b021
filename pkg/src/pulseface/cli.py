import argparse
import sys

from pulseface.errors import EXIT_OK, EXIT_USAGE, PulsefaceError, exit_code_for
from pulseface.tools.log import error
from pulseface.tools.validate_inputs import validate_args

_STAGE = "CLI"

STAGE_HELP = {
    "synth-gen": "Generate the synthetic corpus and its manifest.",
    "preprocess": "Align faces (rotation search), crop and record skipped clips.",
    "denoise": "Clean the reference PPG and exclude unusable windows.",
    "train-hr": "Train the rPPG backbone with the negative Pearson loss.",
    "train-spo2": "Train the SpO2 head (weighted RMSE, LDS, time reversal).",
    "predict": "Predict HR and SpO2 for every window of the evaluation split.",
    "eval": "Compute MAE/RMSE/MAPE/SD over 2-8 s windows.",
    "plot": "Export scatter and Bland-Altman figures.",
}


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> ArgumentParser:
    epilog = (
        "Examples:\n"
        "  # Whole pipeline on the default synthetic preset:\n"
        "  pulseface --out runs/demo run\n\n"
        "  # Whole pipeline from a config file, overriding the seed:\n"
        "  pulseface --config configs/desk.toml --seed 11 run\n\n"
        "  # One stage at a time (later stages read what earlier ones wrote):\n"
        "  pulseface --out runs/demo synth-gen\n"
        "  pulseface --out runs/demo preprocess\n\n"
        "  # Paired SpO2 ablation (plain RMSE, LDS, LDS + time reversal):\n"
        "  pulseface --config configs/desk.toml ablate\n\n"
        "Notes:\n"
        "  - Global flags go before the subcommand and override the [run] section of the config.\n"
        "  - Stages whose config and inputs are unchanged are skipped; use --force to rerun.\n"
        "  - Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.\n"
    )
    parser = ArgumentParser(
        prog="pulseface",
        description="Heart rate and SpO2 from facial video (rPPG pipeline)",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        "-c",
        "--config",
        default=None,
        help="Pipeline config (TOML). Default: built-in defaults.",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Seed for data generation, model init and shuffling (overrides [run].seed).",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="Worker threads for corpus generation, alignment and denoising.",
    )
    parser.add_argument(
        "-o",
        "--out",
        default=None,
        help="Run directory (default: [run].out, runs/default).",
    )
    parser.add_argument(
        "-V",
        "--version",
        action="version",
        version="pulseface 0.1.0",
        help="Show program version and exit.",
    )

    commands = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    commands.required = True
    for stage, text in STAGE_HELP.items():
        sub = commands.add_parser(stage, help=text, description=text)
        sub.add_argument("--force", action="store_true", help="Rerun even if the stage is cached.")
    run = commands.add_parser("run", help="Run every stage in order.", description="Run every stage in order.")
    run.add_argument("--force", action="store_true", help="Rerun every stage.")
    ablate_help = "Train plain RMSE, LDS and LDS + time-reversal SpO2 variants and compare them."
    ablate = commands.add_parser("ablate", help=ablate_help, description=ablate_help)
    ablate.add_argument("--force", action="store_true", help="Rerun the data stages and every variant.")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args = validate_args(args, parser)

    from pulseface.pipeline import run_ablation, run_pipeline, run_stage

    try:
        if args.command == "run":
            run_pipeline(args.pipeline_config, force=args.force)
        elif args.command == "ablate":
            run_ablation(args.pipeline_config, force=args.force)
        else:
            run_stage(args.command, args.pipeline_config, force=args.force)
    except (PulsefaceError, OSError, ValueError, ArithmeticError) as exc:
        error(_STAGE, f"{args.command}: {exc}")
        return exit_code_for(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

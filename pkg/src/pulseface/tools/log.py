"""Simple stage-based logging for the pipeline."""

import sys


def log(stage: str, message: str) -> None:
    """Print a formatted log message with a stage tag."""
    print(f"[{stage}] {message}", flush=True)


def warn(stage: str, message: str) -> None:
    """Print a stage-tagged warning to stderr."""
    print(f"[{stage}] Warning: {message}", file=sys.stderr, flush=True)


def error(stage: str, message: str) -> None:
    """Print a stage-tagged error to stderr."""
    print(f"[{stage}] Error: {message}", file=sys.stderr, flush=True)

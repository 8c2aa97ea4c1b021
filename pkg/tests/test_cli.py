import pytest

from pulseface.cli import build_parser, main
from pulseface.errors import (
    EXIT_DATA,
    EXIT_NUMERICAL,
    EXIT_USAGE,
    DegenerateBatchError,
    FormatError,
    NumericalError,
    RangeError,
    exit_code_for,
)


def _exit_code(argv) -> int:
    with pytest.raises(SystemExit) as info:
        main(argv)
    return info.value.code


def test_missing_command_is_a_usage_error():
    assert _exit_code([]) == EXIT_USAGE


def test_unknown_command_is_a_usage_error():
    assert _exit_code(["train"]) == EXIT_USAGE


def test_bad_threads(tmp_path, capsys):
    assert _exit_code(["--out", str(tmp_path), "--threads", "0", "run"]) == EXIT_USAGE
    assert "--threads must be >= 1" in capsys.readouterr().err


def test_negative_seed(tmp_path):
    assert _exit_code(["--out", str(tmp_path), "--seed", "-1", "synth-gen"]) == EXIT_USAGE


def test_missing_config_file(tmp_path):
    assert _exit_code(["--config", str(tmp_path / "nope.toml"), "run"]) == EXIT_USAGE


def test_invalid_config(tmp_path, capsys):
    path = tmp_path / "c.toml"
    path.write_text("[train_hr]\nepochs = 0\n")
    assert _exit_code(["--config", str(path), "--out", str(tmp_path / "run"), "run"]) == EXIT_USAGE
    assert "Invalid config" in capsys.readouterr().err


def test_stage_without_inputs_is_a_data_error(tmp_path, capsys):
    assert main(["--out", str(tmp_path / "run"), "preprocess"]) == EXIT_DATA
    assert "[CLI] Error: preprocess" in capsys.readouterr().err


def test_version(capsys):
    assert _exit_code(["--version"]) == 0
    assert "pulseface" in capsys.readouterr().out


def test_every_stage_has_a_subcommand():
    from pulseface.pipeline import STAGES

    parser = build_parser()
    for stage in STAGES + ("run", "ablate"):
        args = parser.parse_args([stage, "--force"])
        assert args.command == stage and args.force


@pytest.mark.parametrize(
    "exc, code",
    [
        (NumericalError("nan"), EXIT_NUMERICAL),
        (DegenerateBatchError("empty"), EXIT_NUMERICAL),
        (ZeroDivisionError(), EXIT_NUMERICAL),
        (FormatError("bad magic", 0), EXIT_DATA),
        (RangeError("x"), EXIT_DATA),
        (FileNotFoundError("m.json"), EXIT_DATA),
        (KeyError("k"), EXIT_USAGE),
    ],
)
def test_exit_code_mapping(exc, code):
    assert exit_code_for(exc) == code

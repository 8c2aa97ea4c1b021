"""
Pipeline configuration: a TOML file mapped onto frozen dataclasses.

Sections: [run], [synth], [preprocess], [denoise], [model], [train_hr],
[train_spo2], [lds], [eval]. Missing sections and keys take the dataclass
defaults; unknown ones are rejected.
"""

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace

from pulseface.errors import RangeError
from pulseface.losses import LdsConfig
from pulseface.physnet import PhysNetConfig
from pulseface.ppg_clean import DenoiseConfig
from pulseface.synthgen import SynthConfig
from pulseface.training import TrainConfig

EVAL_METHODS = ("physnet", "pos", "chrom")


@dataclass(frozen=True)
class RunConfig:
    out: str = "runs/default"
    seed: int = 7
    threads: int = 1

    def __post_init__(self):
        if self.threads < 1:
            raise RangeError(f"run.threads must be >= 1, got {self.threads}")


@dataclass(frozen=True)
class PreprocessConfig:
    crop_size: int = 32

    def __post_init__(self):
        if self.crop_size < 8:
            raise RangeError(f"preprocess.crop_size must be >= 8, got {self.crop_size}")


@dataclass(frozen=True)
class EvalConfig:
    method: str = "physnet"
    windows_s: tuple[float, ...] = (2.0, 4.0, 6.0, 8.0)
    split: str = "test"

    def __post_init__(self):
        object.__setattr__(self, "windows_s", tuple(float(w) for w in self.windows_s))
        if self.method not in EVAL_METHODS:
            raise RangeError(f"eval.method must be one of {EVAL_METHODS}, got {self.method!r}")
        if not self.windows_s:
            raise RangeError("eval.windows_s must not be empty")


@dataclass(frozen=True)
class PipelineConfig:
    run: RunConfig = field(default_factory=RunConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)
    model: PhysNetConfig = field(default_factory=PhysNetConfig)
    train_hr: TrainConfig = field(default_factory=TrainConfig)
    train_spo2: TrainConfig = field(
        default_factory=lambda: TrainConfig(augment_time_reversal=True, use_lds=True)
    )
    lds: LdsConfig = field(default_factory=LdsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_overrides(self, out: str | None = None, seed: int | None = None, threads: int | None = None) -> "PipelineConfig":
        """Apply global CLI flags; ``seed`` reseeds data generation, model init and shuffling."""
        cfg = self
        run = replace(
            cfg.run,
            out=cfg.run.out if out is None else out,
            seed=cfg.run.seed if seed is None else seed,
            threads=cfg.run.threads if threads is None else threads,
        )
        cfg = replace(cfg, run=run)
        if seed is not None:
            cfg = replace(
                cfg,
                synth=replace(cfg.synth, seed=seed),
                model=replace(cfg.model, seed=seed),
                train_hr=replace(cfg.train_hr, seed=seed),
                train_spo2=replace(cfg.train_spo2, seed=seed),
            )
        return cfg


def _build(section: str, cls, values: dict, base=None):
    if not isinstance(values, dict):
        raise RangeError(f"[{section}] must be a table")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise RangeError(f"unknown config key {section}.{key}")
    try:
        return replace(base, **values) if base is not None else cls(**values)
    except TypeError as exc:
        raise RangeError(f"[{section}]: {exc}") from exc


def parse_config(data: dict) -> PipelineConfig:
    defaults = PipelineConfig()
    sections = [f.name for f in fields(PipelineConfig)]
    for section in data:
        if section not in sections:
            raise RangeError(f"unknown config section [{section}]")

    values = {}
    synth = data.get("synth", {})
    if "preset" in synth:
        preset = SynthConfig.from_preset(synth["preset"])
        values["synth"] = _build("synth", SynthConfig, {k: v for k, v in synth.items() if k != "preset"}, preset)
    for section in sections:
        if section in data and section not in values:
            values[section] = _build(section, type(getattr(defaults, section)), data[section], getattr(defaults, section))
    return replace(defaults, **values)


def load_config(path: str | None) -> PipelineConfig:
    """Read a TOML config; ``None`` gives the defaults."""
    if path is None:
        return PipelineConfig()
    with open(path, "rb") as f:
        try:
            data = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise RangeError(f"{path}: {exc}") from exc
    return parse_config(data)

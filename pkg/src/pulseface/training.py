"""
Training and inference for the rPPG backbone and the SpO2 head.

Steps of one training run:
    1. Load retained windows of the train and val splits from the manifest
    2. Pair every window with its time-reversed copy (optional); pairs are
       shuffled as one unit and never split across batches
    3. Per epoch: shuffle with a seed derived from (seed, epoch), step SGD
       under the one-cycle schedule, evaluate on val
    4. Save a PFCK checkpoint and the JSON history

Runs are bit-deterministic for a given (seed, config, manifest).
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from pulseface.autodiff import Tensor, no_grad
from pulseface.checkpoint import load_checkpoint, save_checkpoint
from pulseface.containers import frames_to_u8, read_frames, read_waveform
from pulseface.errors import DegenerateBatchError, RangeError, ShapeError
from pulseface.losses import LdsConfig, lds_weights, pearson_loss, weighted_rmse
from pulseface.manifest import Manifest
from pulseface.physnet import PhysNet, PhysNetConfig, Spo2Head, Spo2HeadConfig, Spo2Model
from pulseface.preprocess import CLIP_FRAMES, TARGET_FPS, BBox, FrameTensor, crop_resize, prepare_model_input
from pulseface.signal_core import Waveform, resample_linear
from pulseface.tools.log import log, warn

_STAGE = "Train"

OPTIMIZERS = ("sgd_momentum", "sgd")
FINE_TUNE_FROZEN = ("encoder.0.", "encoder.1.")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 27
    init_lr: float = 0.01
    batch_size: int = 8
    momentum: float = 0.9
    optimizer: str = "sgd_momentum"
    warmup_fraction: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 100.0
    frozen_prefixes: tuple[str, ...] = ()
    augment_time_reversal: bool = False
    use_lds: bool = True
    fine_tune_from: str | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frozen_prefixes", tuple(self.frozen_prefixes))
        if self.epochs < 1:
            raise RangeError(f"epochs must be >= 1, got {self.epochs}")
        # lr = 0 is accepted: it is the no-op training run
        if self.init_lr < 0:
            raise RangeError(f"init_lr must be >= 0, got {self.init_lr}")
        if self.batch_size < 1:
            raise RangeError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise RangeError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise RangeError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise RangeError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.div_factor < 1 or self.final_div_factor < 1:
            raise RangeError("div_factor and final_div_factor must be >= 1")


def one_cycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """
    Cosine warmup from init_lr/div_factor to init_lr over the first
    ``warmup_fraction`` of the steps, then cosine anneal to
    init_lr/final_div_factor at the last step.
    """
    peak = cfg.init_lr
    if total_steps <= 1:
        return peak
    start = peak / cfg.div_factor
    end = peak / cfg.final_div_factor
    warm = max(1, int(round(cfg.warmup_fraction * total_steps)))
    if step < warm:
        return start + (peak - start) * (1.0 - math.cos(math.pi * step / warm)) / 2.0
    frac = min(1.0, (step - warm) / max(1, total_steps - 1 - warm))
    return end + (peak - end) * (1.0 + math.cos(math.pi * frac)) / 2.0


class SGD:
    """Plain or heavy-ball momentum SGD over the trainable parameters."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9):
        self.params = {name: p for name, p in params.items() if p.requires_grad}
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if self.momentum:
                self.velocity[name] = self.momentum * self.velocity[name] + p.grad
                update = self.velocity[name]
            else:
                update = p.grad
            p.data = p.data - lr * update


def freeze(model, prefixes) -> list[str]:
    """Stop gradient flow into every parameter whose name starts with one of ``prefixes``."""
    frozen = []
    for name, p in model.parameters().items():
        if any(name.startswith(prefix) for prefix in prefixes):
            p.requires_grad = False
            p.grad = None
            frozen.append(name)
    return frozen


@dataclass(frozen=True, eq=False)
class WindowDataset:
    """
    Aligned 2 s windows with their supervision.

    ``frames`` is N x T x S x S x 3 u8, ``ppg`` N x T reference PPG
    resampled to the video rate.
    """

    frames: np.ndarray
    ppg: np.ndarray
    hr_bpm: np.ndarray
    spo2_pct: np.ndarray
    clip_ids: tuple[str, ...] = ()
    window_indices: tuple[int, ...] = ()
    fps: float = TARGET_FPS

    def __post_init__(self):
        n = self.frames.shape[0]
        if self.frames.ndim != 5 or self.frames.shape[-1] != 3:
            raise ShapeError("WindowDataset.frames", self.frames.shape, ("N", "T", "S", "S", 3))
        if self.ppg.shape != self.frames.shape[:2]:
            raise ShapeError("WindowDataset.ppg", self.ppg.shape, self.frames.shape[:2])
        if self.hr_bpm.shape != (n,) or self.spo2_pct.shape != (n,):
            raise ShapeError("WindowDataset labels", self.hr_bpm.shape, self.spo2_pct.shape, (n,))

    def __len__(self) -> int:
        return self.frames.shape[0]

    def clip(self, i: int) -> FrameTensor:
        return FrameTensor(self.frames[i].astype(np.float64) / 255.0, self.fps)

    def model_input(self, i: int, reverse: bool = False) -> np.ndarray:
        clip = self.clip(i)
        if reverse:
            clip = FrameTensor(np.ascontiguousarray(clip.data[::-1]), clip.fps)
        return prepare_model_input(clip)

    def target(self, i: int, reverse: bool = False) -> np.ndarray:
        return self.ppg[i, ::-1].copy() if reverse else self.ppg[i]

    @classmethod
    def empty(cls, frames: int = CLIP_FRAMES, size: int = 32) -> "WindowDataset":
        return cls(
            np.zeros((0, frames, size, size, 3), dtype=np.uint8),
            np.zeros((0, frames)),
            np.zeros(0),
            np.zeros(0),
        )


def _window_frames(data: np.ndarray, start: int, frames: int, size: int) -> np.ndarray | None:
    window = data[start : start + frames]
    if window.shape[0] < frames:
        return None
    if window.shape[1:3] != (size, size):
        height, width = window.shape[1:3]
        resized = crop_resize(window.astype(np.float64) / 255.0, BBox(0, 0, width, height), size)
        window = frames_to_u8(resized)
    return window


def load_windows(manifest: Manifest, split: str | None, size: int = 32, frames: int = CLIP_FRAMES) -> WindowDataset:
    """
    Collect every retained window of ``split``.

    Frames come from the aligned container when preprocessing has run
    (window k at frames k*T..k*T+T), otherwise from the raw recording. The
    target is the cleaned PPG when present, resampled to the video rate.
    """
    items = {"frames": [], "ppg": [], "hr": [], "spo2": [], "clip_ids": [], "indices": []}
    for clip in manifest.clips(split):
        labels = clip.retained_labels()
        if not labels:
            continue
        video_path = clip.aligned_path or clip.frames_path
        data, fps = read_frames(manifest.resolve(video_path))
        ppg_path = clip.cleaned_ppg_path or clip.ppg_path
        ppg = resample_linear(read_waveform(manifest.resolve(ppg_path)), fps)
        for label in labels:
            start = label.index * frames if clip.aligned_path else label.start_frame
            window = _window_frames(data, start, frames, size)
            target = ppg.samples[label.start_frame : label.start_frame + frames]
            if window is None or target.size < frames:
                warn(_STAGE, f"{clip.clip_id} window {label.index}: recording too short, skipped")
                continue
            items["frames"].append(window)
            items["ppg"].append(target)
            items["hr"].append(label.hr_bpm)
            items["spo2"].append(label.spo2_pct)
            items["clip_ids"].append(clip.clip_id)
            items["indices"].append(label.index)

    if not items["frames"]:
        return WindowDataset.empty(frames, size)
    return WindowDataset(
        np.stack(items["frames"]),
        np.stack(items["ppg"]),
        np.asarray(items["hr"], dtype=np.float64),
        np.asarray(items["spo2"], dtype=np.float64),
        tuple(items["clip_ids"]),
        tuple(items["indices"]),
    )


@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    frozen: list[str] = field(default_factory=list)

    def save_history(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.history, f, indent=2)
            f.write("\n")


def _samples(n: int, augment: bool) -> list[tuple[tuple[int, bool], ...]]:
    """Shuffle units: each window alone, or paired with its time-reversed copy."""
    if augment:
        return [((i, False), (i, True)) for i in range(n)]
    return [((i, False),) for i in range(n)]


def _units_per_batch(units: list, batch_size: int) -> int:
    return max(1, batch_size // len(units[0]))


def _batches(units: list, batch_size: int, rng: np.random.Generator) -> list[list[tuple[int, bool]]]:
    """Shuffle whole units so a reversed copy always shares a batch with its original."""
    per_batch = _units_per_batch(units, batch_size)
    order = rng.permutation(len(units))
    return [
        [sample for k in order[start : start + per_batch] for sample in units[k]]
        for start in range(0, len(order), per_batch)
    ]


def _fit(model, train: WindowDataset, val: WindowDataset, cfg: TrainConfig, batch_loss, val_loss, name: str) -> TrainResult:
    if len(train) == 0:
        raise DegenerateBatchError(f"{name}: the training split has no retained windows")
    frozen = freeze(model, cfg.frozen_prefixes)
    if frozen:
        log(_STAGE, f"Frozen parameters: {', '.join(frozen)}")
    momentum = cfg.momentum if cfg.optimizer == "sgd_momentum" else 0.0
    optimizer = SGD(model.parameters(), momentum)

    units = _samples(len(train), cfg.augment_time_reversal)
    steps_per_epoch = math.ceil(len(units) / _units_per_batch(units, cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    log(_STAGE, f"{name}: {len(train)} train / {len(val)} val windows, {steps_per_epoch} steps per epoch")

    history = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        losses, sizes = [], []
        lr = cfg.init_lr
        for batch in _batches(units, cfg.batch_size, rng):
            lr = one_cycle_lr(step, total_steps, cfg)
            model.zero_grad()
            loss = batch_loss(model, train, batch)
            loss.backward()
            optimizer.step(lr)
            losses.append(loss.item())
            sizes.append(len(batch))
            step += 1
        record = {
            "epoch": epoch,
            "steps": len(losses),
            "lr": lr,
            "train_loss": float(np.average(losses, weights=sizes)),
            "val_loss": val_loss(model, val) if len(val) else None,
        }
        history.append(record)
        val_text = "n/a" if record["val_loss"] is None else f"{record['val_loss']:.4f}"
        log(_STAGE, f"{name} epoch {epoch + 1}/{cfg.epochs}: train {record['train_loss']:.4f}, val {val_text}")

    return TrainResult(model.state_dict(), history, frozen)


def _hr_batch(model: PhysNet, data: WindowDataset, batch) -> Tensor:
    x = np.stack([data.model_input(i, rev) for i, rev in batch])
    y = np.stack([data.target(i, rev) for i, rev in batch])
    return pearson_loss(model(x), y)


def _hr_val(model: PhysNet, data: WindowDataset, batch_size: int = 8) -> float:
    total = 0.0
    with no_grad():
        for start in range(0, len(data), batch_size):
            idx = range(start, min(start + batch_size, len(data)))
            loss = _hr_batch(model, data, [(i, False) for i in idx])
            total += loss.item() * len(idx)
    return total / len(data)


def fit_hr(model: PhysNet, train: WindowDataset, val: WindowDataset, cfg: TrainConfig) -> TrainResult:
    """Minimize the mean negative-Pearson loss between predicted rPPG and reference PPG."""
    return _fit(model, train, val, cfg, _hr_batch, _hr_val, "train-hr")


def fit_spo2(
    model: Spo2Model,
    train: WindowDataset,
    val: WindowDataset,
    cfg: TrainConfig,
    lds: LdsConfig | None = None,
) -> TrainResult:
    """Minimize weighted RMSE on SpO2, with LDS weights over the train labels when ``cfg.use_lds``."""
    if len(train) and cfg.use_lds:
        weights = lds_weights(train.spo2_pct, lds or LdsConfig())
    else:
        weights = np.ones(len(train))

    def batch_loss(m, data, batch):
        x = np.stack([data.model_input(i, rev) for i, rev in batch])
        idx = [i for i, _ in batch]
        return weighted_rmse(m(x), data.spo2_pct[idx], weights[idx])

    def val_loss(m, data):
        preds = predict_spo2_batch(m, data)
        return float(np.sqrt(np.mean((preds - data.spo2_pct) ** 2)))

    return _fit(model, train, val, cfg, batch_loss, val_loss, "train-spo2")


def predict_spo2_batch(model: Spo2Model, data: WindowDataset, batch_size: int = 8) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            x = np.stack([data.model_input(i) for i in range(start, min(start + batch_size, len(data)))])
            out.append(model(x).data)
    return np.concatenate(out) if out else np.zeros(0)


def predict_waveform_batch(model: PhysNet, data: WindowDataset, batch_size: int = 8) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            x = np.stack([data.model_input(i) for i in range(start, min(start + batch_size, len(data)))])
            out.append(model(x).data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.frames))


def _model_input(model_cfg: PhysNetConfig, clip) -> np.ndarray:
    if isinstance(clip, FrameTensor):
        expected = (model_cfg.frames, model_cfg.size, model_cfg.size)
        if (clip.n_frames, *clip.frame_shape) != expected:
            raise ShapeError("predict", (clip.n_frames, *clip.frame_shape), expected)
        x = prepare_model_input(clip)
    else:
        x = np.asarray(clip, dtype=np.float64)
    expected = (3, model_cfg.frames, model_cfg.size, model_cfg.size)
    if x.shape != expected:
        raise ShapeError("predict", x.shape, expected)
    return x[None]


def predict(model: PhysNet | Spo2Model, clip: FrameTensor | np.ndarray) -> Waveform | float:
    """
    Deterministic forward pass on one aligned clip.

    A ``PhysNet`` returns the rPPG waveform (T samples at the clip rate); a
    ``Spo2Model`` returns SpO2 in percent. ``clip`` is an aligned FrameTensor
    or an already prepared C x T x H x W array.
    """
    backbone = model.backbone if isinstance(model, Spo2Model) else model
    x = _model_input(backbone.cfg, clip)
    fps = clip.fps if isinstance(clip, FrameTensor) else TARGET_FPS
    with no_grad():
        out = model(x)
    if isinstance(model, Spo2Model):
        return float(out.data[0])
    return Waveform(out.data[0], fps)


def save_model(path: str, model: PhysNet | Spo2Model, train_cfg: TrainConfig | None = None) -> None:
    config = {"train": asdict(train_cfg) if train_cfg else None}
    if isinstance(model, Spo2Model):
        config.update(kind="spo2", model=model.backbone.cfg.to_dict(), head=asdict(model.head.cfg))
    else:
        config.update(kind="hr", model=model.cfg.to_dict())
    save_checkpoint(path, model.state_dict(), config)


def load_model(path: str) -> PhysNet | Spo2Model:
    """Rebuild the model recorded in a checkpoint and load its parameters."""
    state, config = load_checkpoint(path)
    backbone = PhysNet(PhysNetConfig(**config["model"]))
    model = backbone
    if config.get("kind") == "spo2":
        model = Spo2Model(backbone, Spo2Head(Spo2HeadConfig(**config["head"])))
    model.load_state_dict(state)
    return model


def train_hr(model: PhysNet, manifest: Manifest, cfg: TrainConfig, out_dir: str | None = None) -> TrainResult:
    # === 1. Load windows ===
    train = load_windows(manifest, "train", model.cfg.size, model.cfg.frames)
    val = load_windows(manifest, "val", model.cfg.size, model.cfg.frames)

    # === 2. Fit ===
    result = fit_hr(model, train, val, cfg)

    # === 3. Save checkpoint and history ===
    if out_dir:
        save_model(os.path.join(out_dir, "hr.pfck"), model, cfg)
        result.save_history(os.path.join(out_dir, "hr_history.json"))
    return result


def train_spo2(
    model: Spo2Model,
    manifest: Manifest,
    cfg: TrainConfig,
    lds: LdsConfig | None = None,
    out_dir: str | None = None,
) -> TrainResult:
    # === 1. Fine-tune start point ===
    if cfg.fine_tune_from:
        state, _ = load_checkpoint(cfg.fine_tune_from)
        loaded = model.load_state_dict(state, strict=False)
        log(_STAGE, f"Fine-tuning from {cfg.fine_tune_from} ({len(loaded)} tensors loaded)")
        if not cfg.frozen_prefixes:
            cfg = replace(cfg, frozen_prefixes=FINE_TUNE_FROZEN)

    # === 2. Load windows ===
    size, frames = model.backbone.cfg.size, model.backbone.cfg.frames
    train = load_windows(manifest, "train", size, frames)
    val = load_windows(manifest, "val", size, frames)

    # === 3. Fit ===
    result = fit_spo2(model, train, val, cfg, lds)

    # === 4. Save checkpoint and history ===
    if out_dir:
        save_model(os.path.join(out_dir, "spo2.pfck"), model, cfg)
        result.save_history(os.path.join(out_dir, "spo2_history.json"))
    return result

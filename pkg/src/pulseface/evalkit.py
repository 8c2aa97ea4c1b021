"""
Evaluation: per-window error metrics, multi-window HR evaluation, paired
SpO2 ablation runs, and scatter / Bland-Altman exports.
"""

import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from pulseface.errors import ShapeError, SignalLengthError  # noqa: E402
from pulseface.losses import LdsConfig  # noqa: E402
from pulseface.manifest import Manifest  # noqa: E402
from pulseface.physnet import PhysNet, PhysNetConfig, Spo2Head, Spo2HeadConfig, Spo2Model  # noqa: E402
from pulseface.preprocess import FrameTensor  # noqa: E402
from pulseface.signal_core import Waveform, extract_hr_bpm  # noqa: E402
from pulseface.tools.log import log, warn  # noqa: E402
from pulseface.training import TrainConfig, WindowDataset, fit_spo2, load_windows, predict_spo2_batch  # noqa: E402

_STAGE = "Eval"

BASE_WINDOW_S = 2.0
LOA_FACTOR = 1.96


@dataclass
class EvalReport:
    mae: float
    rmse: float
    mape_pct: float | None
    sd: float
    n_windows: int
    tw_seconds: float
    per_window: list[tuple[float, float, float]] = field(default_factory=list)
    mape_excluded: int = 0
    label: str = ""

    def refs(self) -> np.ndarray:
        return np.array([row[0] for row in self.per_window])

    def preds(self) -> np.ndarray:
        return np.array([row[1] for row in self.per_window])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        data["per_window"] = [tuple(row) for row in data.get("per_window", [])]
        return cls(**data)

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())


def compute_metrics(refs, preds, tw_seconds: float = BASE_WINDOW_S, label: str = "") -> EvalReport:
    """
    MAE, RMSE, MAPE and population SD of the signed error ``pred - ref``.

    References equal to zero are left out of MAPE only; their count is
    reported as ``mape_excluded``.
    """
    refs = np.asarray(refs, dtype=np.float64).reshape(-1)
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    if refs.shape != preds.shape:
        raise ShapeError("compute_metrics", refs.shape, preds.shape)
    if refs.size == 0:
        raise SignalLengthError("compute_metrics needs at least one window")

    errors = preds - refs
    nonzero = refs != 0
    mape = float(np.mean(np.abs(errors[nonzero]) / np.abs(refs[nonzero])) * 100.0) if nonzero.any() else None
    return EvalReport(
        mae=float(np.mean(np.abs(errors))),
        rmse=float(np.sqrt(np.mean(errors**2))),
        mape_pct=mape,
        sd=float(np.std(errors)),
        n_windows=int(refs.size),
        tw_seconds=float(tw_seconds),
        per_window=[(float(r), float(p), float(e)) for r, p, e in zip(refs, preds, errors)],
        mape_excluded=int((~nonzero).sum()),
        label=label,
    )


def _zscore(x: np.ndarray) -> np.ndarray:
    std = x.std()
    return (x - x.mean()) / std if std > 0 else x - x.mean()


def _consecutive_groups(data: WindowDataset, per_group: int) -> list[list[int]]:
    """Non-overlapping runs of ``per_group`` consecutive windows of the same clip."""
    groups, run = [], []
    for i in range(len(data)):
        if run and (
            data.clip_ids[i] != data.clip_ids[run[-1]] or data.window_indices[i] != data.window_indices[run[-1]] + 1
        ):
            run = []
        run.append(i)
        if len(run) == per_group:
            groups.append(run)
            run = []
    return groups


def multi_window_eval(
    rppg: Callable[[FrameTensor], Waveform],
    data: Manifest | WindowDataset,
    windows_s=(2.0, 4.0, 6.0, 8.0),
    split: str | None = "test",
    size: int = 32,
    label: str = "",
) -> list[EvalReport]:
    """
    HR error at several window lengths.

    ``rppg`` maps one aligned 2 s clip to a pulse waveform. Longer windows
    concatenate the (standardized) waveforms of consecutive 2 s clips of a
    recording before HR extraction; the reference is the mean label HR of
    the clips involved. Window lengths no recording can fill are skipped
    with a warning.
    """
    if isinstance(data, Manifest):
        data = load_windows(data, split, size)
    waveforms = [rppg(data.clip(i)) for i in range(len(data))]

    reports = []
    for tw in windows_s:
        per_group = int(round(tw / BASE_WINDOW_S))
        if per_group < 1 or not np.isclose(per_group * BASE_WINDOW_S, tw):
            warn(_STAGE, f"{tw:g} s is not a multiple of {BASE_WINDOW_S:g} s, skipped")
            continue
        groups = _consecutive_groups(data, per_group)
        if not groups:
            warn(_STAGE, f"no recording covers {tw:g} s windows, skipped")
            continue
        refs, preds = [], []
        for group in groups:
            samples = np.concatenate([_zscore(waveforms[i].samples) for i in group])
            preds.append(extract_hr_bpm(Waveform(samples, waveforms[group[0]].sample_rate_hz)))
            refs.append(float(np.mean(data.hr_bpm[group])))
        report = compute_metrics(refs, preds, tw, label)
        log(_STAGE, f"{label or 'HR'} {tw:g} s: MAE {report.mae:.2f} bpm over {report.n_windows} windows")
        reports.append(report)
    return reports


@dataclass(frozen=True)
class BlandAltmanStats:
    bias: float
    sd: float
    lower: float
    upper: float


def bland_altman_stats(report: EvalReport) -> BlandAltmanStats:
    """Bias and 95% limits of agreement (bias +/- 1.96 SD, population SD) of ``pred - ref``."""
    diff = report.preds() - report.refs()
    bias = float(diff.mean())
    sd = float(diff.std())
    return BlandAltmanStats(bias, sd, bias - LOA_FACTOR * sd, bias + LOA_FACTOR * sd)


def _save_svg(fig, svg_path: str) -> None:
    """Write ``fig`` without a timestamp and with fixed element ids, so reruns are byte-identical."""
    with matplotlib.rc_context({"svg.hashsalt": "pulseface"}):
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _require_points(report: EvalReport) -> None:
    if not report.per_window:
        raise SignalLengthError("cannot export an empty report")


def export_scatter(report: EvalReport, csv_path: str, svg_path: str, unit: str = "") -> None:
    """Prediction vs reference CSV (``ref,pred``) and an SVG scatter with the y = x line."""
    _require_points(report)
    os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
    os.makedirs(os.path.dirname(os.path.abspath(svg_path)), exist_ok=True)
    frame = pd.DataFrame({"ref": report.refs(), "pred": report.preds()})
    frame.to_csv(csv_path, index=False)

    lo = float(min(frame["ref"].min(), frame["pred"].min()))
    hi = float(max(frame["ref"].max(), frame["pred"].max()))
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(frame["ref"], frame["pred"], s=12, alpha=0.7)
    ax.plot([lo, hi], [lo, hi], "r--", linewidth=1, label="y = x")
    ax.set_xlabel(f"Reference {unit}".strip())
    ax.set_ylabel(f"Predicted {unit}".strip())
    ax.set_title(report.label or "Predicted vs reference")
    ax.legend(loc="upper left")
    fig.tight_layout()
    _save_svg(fig, svg_path)


def export_bland_altman(report: EvalReport, csv_path: str, svg_path: str, unit: str = "") -> BlandAltmanStats:
    """Bland-Altman CSV (``mean,diff``) and SVG with bias and limit-of-agreement lines."""
    _require_points(report)
    stats = bland_altman_stats(report)
    os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
    os.makedirs(os.path.dirname(os.path.abspath(svg_path)), exist_ok=True)
    refs, preds = report.refs(), report.preds()
    frame = pd.DataFrame({"mean": (refs + preds) / 2.0, "diff": preds - refs})
    frame.to_csv(csv_path, index=False)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(frame["mean"], frame["diff"], s=12, alpha=0.7)
    ax.axhline(stats.bias, color="k", linewidth=1, label=f"bias {stats.bias:.2f}")
    ax.axhline(stats.lower, color="r", linestyle="--", linewidth=1, label=f"-1.96 SD {stats.lower:.2f}")
    ax.axhline(stats.upper, color="r", linestyle="--", linewidth=1, label=f"+1.96 SD {stats.upper:.2f}")
    ax.set_xlabel(f"Mean of reference and prediction {unit}".strip())
    ax.set_ylabel(f"Prediction - reference {unit}".strip())
    ax.set_title(report.label or "Bland-Altman")
    ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    _save_svg(fig, svg_path)
    return stats


_TABLE_COLUMNS = ("label", "tw_seconds", "mae", "rmse", "mape_pct", "sd", "n_windows")


def _table_frame(reports: list[EvalReport]) -> pd.DataFrame:
    rows = [{col: getattr(r, col) for col in _TABLE_COLUMNS} for r in reports]
    return pd.DataFrame(rows, columns=list(_TABLE_COLUMNS))


def render_table(reports: list[EvalReport]) -> str:
    """Aligned plain-text metric table, one row per report."""
    frame = _table_frame(reports)
    return frame.to_string(index=False, float_format=lambda v: f"{v:.3f}", na_rep="-")


def table_to_csv(reports: list[EvalReport], path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    _table_frame(reports).to_csv(path, index=False)


# === SpO2 ablation ===

ABLATION_VARIANTS = (
    ("rmse", {"use_lds": False, "augment_time_reversal": False}),
    ("lds", {"use_lds": True, "augment_time_reversal": False}),
    ("lds+tr", {"use_lds": True, "augment_time_reversal": True}),
)


@dataclass
class AblationResult:
    name: str
    report: EvalReport
    tail_mae: float | None

    def to_dict(self) -> dict:
        return {"name": self.name, "tail_mae": self.tail_mae, "report": asdict(self.report)}


def rare_tail_mae(refs, preds, train_labels, bin_width: float = 1.0, fraction: float = 0.1) -> float | None:
    """
    MAE over the windows whose label is rarest in ``train_labels``.

    Each window's label frequency is the train count in its ``bin_width``
    bin; windows at or below the ``fraction`` quantile of those frequencies
    form the tail.
    """
    refs = np.asarray(refs, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if refs.size == 0:
        return None
    train_bins = np.floor(np.asarray(train_labels, dtype=np.float64) / bin_width).astype(np.int64)
    bins, counts = np.unique(train_bins, return_counts=True)
    lookup = dict(zip(bins.tolist(), counts.tolist()))
    freq = np.array([lookup.get(int(b), 0) for b in np.floor(refs / bin_width).astype(np.int64)])
    tail = freq <= np.quantile(freq, fraction)
    return float(np.mean(np.abs(preds[tail] - refs[tail])))


def ablation_runs(
    train: WindowDataset,
    val: WindowDataset,
    test: WindowDataset,
    model_cfg: PhysNetConfig,
    train_cfg: TrainConfig,
    lds: LdsConfig | None = None,
    variants=ABLATION_VARIANTS,
) -> list[AblationResult]:
    """
    Paired SpO2 runs that differ only in the switches of each variant.

    Every run starts from the same initial weights and trains on the same
    windows for the same number of epochs; only ``test`` is scored.
    """
    if len(test) == 0:
        raise SignalLengthError("ablation needs at least one test window")
    results = []
    for name, switches in variants:
        head = Spo2Head(Spo2HeadConfig(feature_dim=model_cfg.feature_dim, seed=model_cfg.seed))
        model = Spo2Model(PhysNet(model_cfg), head)
        fit_spo2(model, train, val, replace(train_cfg, **switches), lds)
        preds = predict_spo2_batch(model, test)
        report = compute_metrics(test.spo2_pct, preds, BASE_WINDOW_S, label=f"SpO2 ({name})")
        tail = rare_tail_mae(test.spo2_pct, preds, train.spo2_pct)
        log(_STAGE, f"Ablation {name}: RMSE {report.rmse:.3f}, tail MAE {tail:.3f}")
        results.append(AblationResult(name, report, tail))
    return results

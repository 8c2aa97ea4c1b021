"""
End-to-end pulseface pipeline
-----------------------------
Runs the stages in dependency order, each writing into the run directory.
Called via cli.py

Steps:
    1. synth-gen    synthetic corpus + manifest
    2. preprocess   rotation-search alignment, aligned crops, skip log
    3. denoise      reference PPG cleaning, window exclusion
    4. train-hr     rPPG backbone (negative Pearson loss)
    5. train-spo2   backbone + SpO2 head (weighted RMSE, LDS, time reversal)
    6. predict      per-window HR and SpO2 on the evaluation split
    7. eval         metric reports over 2/4/6/8 s windows
    8. plot         scatter and Bland-Altman figures

Every stage has a digest built from its own config and the digest of the
stage before it. A stage whose digest and outputs are already in
``<out>/.cache/<stage>.json`` is not recomputed.

Layout of the run directory:
    corpus/         frames, ppg, truth, aligned, cleaned, reports, manifest.json
    models/         hr.pfck, spo2.pfck and training histories
    predictions/    predictions.csv
    reports/        eval_report.json, per-window-length reports, table.txt/csv,
                    ablation.json and ablation_table.txt/csv from `ablate`
    plots/          CSV + SVG figures
    skips.jsonl     alignment skip records
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from pulseface.classical_rppg import METHODS, roi_trace
from pulseface.containers import read_frame_tensor, read_waveform, write_frames, write_waveform
from pulseface.errors import NoSignalError
from pulseface.evalkit import (
    EvalReport,
    ablation_runs,
    compute_metrics,
    export_bland_altman,
    export_scatter,
    multi_window_eval,
    render_table,
    table_to_csv,
)
from pulseface.manifest import ClipEntry, Manifest, validate_manifest
from pulseface.physnet import PhysNet, Spo2Head, Spo2HeadConfig, Spo2Model
from pulseface.ppg_clean import denoise_ppg
from pulseface.preprocess import CLIP_FRAMES, MarkerFaceDetector, SkipLog, align_video
from pulseface.signal_core import Waveform, extract_hr_bpm
from pulseface.synthgen import generate_corpus
from pulseface.tools.config import PipelineConfig
from pulseface.tools.digest import config_digest
from pulseface.tools.log import log, warn
from pulseface.training import TrainConfig, load_model, load_windows, predict, predict_spo2_batch, predict_waveform_batch, train_hr, train_spo2

_STAGE = "Pipeline"

STAGES = ("synth-gen", "preprocess", "denoise", "train-hr", "train-spo2", "predict", "eval", "plot")
DATA_STAGES = STAGES[:3]
ABLATE = "ablate"


@dataclass
class RunSummary:
    executed: list[str] = field(default_factory=list)
    cached: list[str] = field(default_factory=list)
    digests: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, list[str]] = field(default_factory=dict)


class RunPaths:
    def __init__(self, out: str):
        self.out = out
        self.corpus = os.path.join(out, "corpus")
        self.manifest = os.path.join(self.corpus, "manifest.json")
        self.models = os.path.join(out, "models")
        self.hr_model = os.path.join(self.models, "hr.pfck")
        self.spo2_model = os.path.join(self.models, "spo2.pfck")
        self.predictions = os.path.join(out, "predictions", "predictions.csv")
        self.reports = os.path.join(out, "reports")
        self.eval_report = os.path.join(self.reports, "eval_report.json")
        self.ablation_report = os.path.join(self.reports, "ablation.json")
        self.plots = os.path.join(out, "plots")
        self.skips = os.path.join(out, "skips.jsonl")
        self.cache = os.path.join(out, ".cache")

    def cache_file(self, stage: str) -> str:
        return os.path.join(self.cache, f"{stage}.json")


def _stage_config(cfg: PipelineConfig, stage: str) -> dict:
    sections = {
        "synth-gen": {"synth": asdict(cfg.synth)},
        "preprocess": {"preprocess": asdict(cfg.preprocess)},
        "denoise": {"denoise": asdict(cfg.denoise)},
        "train-hr": {"model": asdict(cfg.model), "train": asdict(cfg.train_hr)},
        "train-spo2": {"model": asdict(cfg.model), "train": asdict(cfg.train_spo2), "lds": asdict(cfg.lds)},
        "predict": {"eval": asdict(cfg.eval)},
        "eval": {"eval": asdict(cfg.eval)},
        "plot": {},
    }
    return sections[stage]


def stage_digests(cfg: PipelineConfig) -> dict[str, str]:
    """Digest of every stage, chained through the stage before it."""
    digests, upstream = {}, ""
    for stage in STAGES:
        upstream = config_digest({"stage": stage, "config": _stage_config(cfg, stage), "upstream": upstream})
        digests[stage] = upstream
    return digests


def _cached(paths: RunPaths, stage: str, digest: str) -> bool:
    path = paths.cache_file(stage)
    if not os.path.exists(path):
        return False
    with open(path, "r", encoding="utf-8") as f:
        entry = json.load(f)
    return entry.get("digest") == digest and all(os.path.exists(p) for p in entry.get("outputs", []))


def _record(paths: RunPaths, stage: str, digest: str, outputs: list[str]) -> None:
    os.makedirs(paths.cache, exist_ok=True)
    with open(paths.cache_file(stage), "w", encoding="utf-8") as f:
        json.dump({"stage": stage, "digest": digest, "outputs": sorted(outputs)}, f, indent=2)
        f.write("\n")


def _map(fn, items, threads: int) -> list:
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(fn, items))


# === Stage functions ===


def run_synth_gen(cfg: PipelineConfig, paths: RunPaths) -> list[str]:
    generate_corpus(cfg.synth, paths.corpus, cfg.run.threads)
    return [paths.manifest]


def _aligned_index_path(manifest: Manifest, clip: ClipEntry) -> str:
    return manifest.resolve(os.path.join("aligned", f"{clip.clip_id}.json"))


def _align_clip_entry(manifest: Manifest, clip: ClipEntry, crop_size: int) -> tuple[list[str], list]:
    video = read_frame_tensor(manifest.resolve(clip.frames_path))
    alignment = align_video(video, MarkerFaceDetector(), clip.clip_id, crop_size)
    # only segments on the 2 s label grid carry labels
    by_start = {segment.start_frame: segment for segment in alignment.segments}

    aligned = np.zeros((len(clip.labels) * CLIP_FRAMES, crop_size, crop_size, 3))
    aligned_windows = []
    for k, label in enumerate(clip.labels):
        segment = by_start.get(label.start_frame)
        label.retained = segment is not None
        if segment is not None:
            aligned[k * CLIP_FRAMES : (k + 1) * CLIP_FRAMES] = segment.clip.data
            aligned_windows.append(label.index)
    clip.retained = bool(aligned_windows)

    aligned_rel = os.path.join("aligned", f"{clip.clip_id}.pfvf")
    write_frames(manifest.resolve(aligned_rel), aligned, video.fps)
    index_path = _aligned_index_path(manifest, clip)
    with open(index_path, "w", encoding="utf-8") as f:
        json.dump({"clip_id": clip.clip_id, "aligned_windows": aligned_windows}, f)
        f.write("\n")
    clip.aligned_path = aligned_rel
    clip.cleaned_ppg_path = None
    clip.clean_report_path = None
    return [manifest.resolve(aligned_rel), index_path], alignment.skips


def run_preprocess(cfg: PipelineConfig, paths: RunPaths) -> list[str]:
    manifest = Manifest.load(paths.manifest)
    if os.path.exists(paths.skips):
        os.remove(paths.skips)
    results = _map(lambda clip: _align_clip_entry(manifest, clip, cfg.preprocess.crop_size), manifest.clips(), cfg.run.threads)

    skip_log = SkipLog(paths.skips)
    outputs = [paths.manifest]
    for written, skips in results:
        skip_log.append(skips)
        outputs.extend(written)
    n_skips = sum(len(skips) for _, skips in results)
    log(_STAGE, f"Aligned {len(results)} recording(s), {n_skips} skip record(s)")
    validate_manifest(manifest)
    manifest.save(paths.manifest)
    return outputs


def _denoise_clip_entry(manifest: Manifest, clip: ClipEntry, cfg: PipelineConfig) -> list[str]:
    w = read_waveform(manifest.resolve(clip.ppg_path))
    clip_ids = [f"{clip.clip_id}#{label.index}" for label in clip.labels]
    result = denoise_ppg(w, clip_ids, cfg=cfg.denoise)

    excluded = set(result.report.excluded_windows)
    aligned = None
    if clip.aligned_path is not None:
        with open(_aligned_index_path(manifest, clip), "r", encoding="utf-8") as f:
            aligned = set(json.load(f)["aligned_windows"])
    for label in clip.labels:
        label.retained = label.index not in excluded and (aligned is None or label.index in aligned)
    clip.retained = any(label.retained for label in clip.labels)

    cleaned_rel = os.path.join("cleaned", f"{clip.clip_id}.pfwv")
    report_rel = os.path.join("reports", f"{clip.clip_id}_clean.json")
    write_waveform(manifest.resolve(cleaned_rel), result.waveform)
    os.makedirs(os.path.dirname(manifest.resolve(report_rel)), exist_ok=True)
    result.report.save(manifest.resolve(report_rel))
    clip.cleaned_ppg_path = cleaned_rel
    clip.clean_report_path = report_rel
    return [manifest.resolve(cleaned_rel), manifest.resolve(report_rel)]


def run_denoise(cfg: PipelineConfig, paths: RunPaths) -> list[str]:
    manifest = Manifest.load(paths.manifest)
    results = _map(lambda clip: _denoise_clip_entry(manifest, clip, cfg), manifest.clips(), cfg.run.threads)
    retained = len(manifest.windows())
    total = sum(len(clip.labels) for clip in manifest.clips())
    log(_STAGE, f"{retained} of {total} window(s) retained after cleaning")
    validate_manifest(manifest)
    manifest.save(paths.manifest)
    return [paths.manifest] + [p for outputs in results for p in outputs]


def run_train_hr(cfg: PipelineConfig, paths: RunPaths) -> list[str]:
    manifest = Manifest.load(paths.manifest)
    train_hr(PhysNet(cfg.model), manifest, cfg.train_hr, paths.models)
    return [paths.hr_model, os.path.join(paths.models, "hr_history.json")]


def _spo2_train_config(cfg: PipelineConfig, paths: RunPaths) -> TrainConfig:
    # "hr" refers to the backbone trained by the train-hr stage of this run
    train = cfg.train_spo2
    if train.fine_tune_from == "hr":
        return TrainConfig(**{**asdict(train), "fine_tune_from": paths.hr_model})
    return train


def run_train_spo2(cfg: PipelineConfig, paths: RunPaths) -> list[str]:
    manifest = Manifest.load(paths.manifest)
    head = Spo2Head(Spo2HeadConfig(feature_dim=cfg.model.feature_dim, seed=cfg.model.seed))
    model = Spo2Model(PhysNet(cfg.model), head)
    train_spo2(model, manifest, _spo2_train_config(cfg, paths), cfg.lds, paths.models)
    return [paths.spo2_model, os.path.join(paths.models, "spo2_history.json")]


def _rppg_fn(cfg: PipelineConfig, paths: RunPaths):
    if cfg.eval.method == "physnet":
        model = load_model(paths.hr_model)
        return lambda clip: predict(model, clip)
    method = METHODS[cfg.eval.method]
    return lambda clip: method(roi_trace(clip))


def run_predict(cfg: PipelineConfig, paths: RunPaths) -> list[str]:
    manifest = Manifest.load(paths.manifest)
    data = load_windows(manifest, cfg.eval.split, cfg.model.size, cfg.model.frames)
    if len(data) == 0:
        raise NoSignalError(f"no retained windows in the {cfg.eval.split} split")

    if cfg.eval.method == "physnet":
        waveforms = predict_waveform_batch(load_model(paths.hr_model), data)
        hr_pred = [extract_hr_bpm(Waveform(row, data.fps)) for row in waveforms]
    else:
        rppg = _rppg_fn(cfg, paths)
        hr_pred = [extract_hr_bpm(rppg(data.clip(i))) for i in range(len(data))]
    spo2_pred = predict_spo2_batch(load_model(paths.spo2_model), data)

    frame = pd.DataFrame(
        {
            "clip_id": data.clip_ids,
            "window": data.window_indices,
            "hr_ref": data.hr_bpm,
            "hr_pred": hr_pred,
            "spo2_ref": data.spo2_pct,
            "spo2_pred": spo2_pred,
        }
    )
    os.makedirs(os.path.dirname(paths.predictions), exist_ok=True)
    frame.to_csv(paths.predictions, index=False)
    log(_STAGE, f"Predictions for {len(frame)} window(s) saved to {paths.predictions}")
    return [paths.predictions]



def run_eval(cfg: PipelineConfig, paths: RunPaths) -> list[str]:
    manifest = Manifest.load(paths.manifest)
    hr_reports = multi_window_eval(
        _rppg_fn(cfg, paths), manifest, cfg.eval.windows_s, cfg.eval.split, cfg.model.size, label=f"HR ({cfg.eval.method})"
    )
    frame = pd.read_csv(paths.predictions)
    spo2_report = compute_metrics(frame["spo2_ref"], frame["spo2_pred"], 2.0, label="SpO2")

    os.makedirs(paths.reports, exist_ok=True)
    outputs = [paths.eval_report]
    for report in hr_reports:
        path = os.path.join(paths.reports, f"hr_{report.tw_seconds:g}s.json")
        report.save(path)
        outputs.append(path)
    spo2_path = os.path.join(paths.reports, "spo2.json")
    spo2_report.save(spo2_path)
    outputs.append(spo2_path)

    all_reports = hr_reports + [spo2_report]
    with open(os.path.join(paths.reports, "table.txt"), "w", encoding="utf-8") as f:
        f.write(render_table(all_reports) + "\n")
    table_to_csv(all_reports, os.path.join(paths.reports, "table.csv"))
    outputs += [os.path.join(paths.reports, "table.txt"), os.path.join(paths.reports, "table.csv")]

    with open(paths.eval_report, "w", encoding="utf-8") as f:
        json.dump({"hr": [asdict(r) for r in hr_reports], "spo2": asdict(spo2_report)}, f, indent=2, sort_keys=True)
        f.write("\n")
    log(_STAGE, "\n" + render_table(all_reports))
    return outputs


def run_plot(cfg: PipelineConfig, paths: RunPaths) -> list[str]:
    outputs = []
    targets = [("spo2", os.path.join(paths.reports, "spo2.json"), "(%)")]
    base = os.path.join(paths.reports, f"hr_{cfg.eval.windows_s[0]:g}s.json")
    if os.path.exists(base):
        targets.insert(0, ("hr", base, "(bpm)"))
    else:
        warn(_STAGE, f"{base} not found, HR plots skipped")
    for name, report_path, unit in targets:
        report = EvalReport.load(report_path)
        scatter = (os.path.join(paths.plots, f"{name}_scatter.csv"), os.path.join(paths.plots, f"{name}_scatter.svg"))
        bland = (os.path.join(paths.plots, f"{name}_bland_altman.csv"), os.path.join(paths.plots, f"{name}_bland_altman.svg"))
        export_scatter(report, *scatter, unit=unit)
        export_bland_altman(report, *bland, unit=unit)
        outputs += [*scatter, *bland]
    log(_STAGE, f"Figures written to {paths.plots}")
    return outputs


STAGE_FUNCTIONS = {
    "synth-gen": run_synth_gen,
    "preprocess": run_preprocess,
    "denoise": run_denoise,
    "train-hr": run_train_hr,
    "train-spo2": run_train_spo2,
    "predict": run_predict,
    "eval": run_eval,
    "plot": run_plot,
}


def run_stage(stage: str, cfg: PipelineConfig, summary: RunSummary | None = None, force: bool = False) -> RunSummary:
    """Run one stage unless its digest and outputs are cached."""
    summary = summary or RunSummary()
    paths = RunPaths(cfg.run.out)
    digest = stage_digests(cfg)[stage]
    summary.digests[stage] = digest
    if not force and _cached(paths, stage, digest):
        log(_STAGE, f"{stage}: cached ({digest[:12]})")
        summary.cached.append(stage)
        return summary

    log(_STAGE, f"{stage}: running")
    outputs = STAGE_FUNCTIONS[stage](cfg, paths)
    _record(paths, stage, digest, outputs)
    summary.executed.append(stage)
    summary.outputs[stage] = outputs
    return summary


def run_pipeline(cfg: PipelineConfig, stages=STAGES, force: bool = False) -> RunSummary:
    """
    Execute ``stages`` in order.

    A stage that reruns invalidates every later stage, since their digests
    are chained but their inputs changed on disk.
    """
    os.makedirs(cfg.run.out, exist_ok=True)
    with open(os.path.join(cfg.run.out, "config.json"), "w", encoding="utf-8") as f:
        json.dump(asdict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")

    summary = RunSummary()
    for stage in stages:
        run_stage(stage, cfg, summary, force=force or bool(summary.executed))
    log(_STAGE, f"Done: {len(summary.executed)} stage(s) run, {len(summary.cached)} cached")
    return summary


# === SpO2 ablation (outside ``run``) ===


def ablation_digest(cfg: PipelineConfig) -> str:
    return config_digest(
        {"stage": ABLATE, "config": _stage_config(cfg, "train-spo2"), "upstream": stage_digests(cfg)["denoise"]}
    )


def _ablate(cfg: PipelineConfig, paths: RunPaths) -> list[str]:
    manifest = Manifest.load(paths.manifest)
    size, frames = cfg.model.size, cfg.model.frames
    train, val, test = (load_windows(manifest, split, size, frames) for split in ("train", "val", cfg.eval.split))
    # trained from scratch, so nothing is frozen
    train_cfg = replace(cfg.train_spo2, fine_tune_from=None, frozen_prefixes=())
    results = ablation_runs(train, val, test, cfg.model, train_cfg, cfg.lds)

    os.makedirs(paths.reports, exist_ok=True)
    with open(paths.ablation_report, "w", encoding="utf-8") as f:
        json.dump([r.to_dict() for r in results], f, indent=2, sort_keys=True)
        f.write("\n")
    reports = [r.report for r in results]
    table_txt = os.path.join(paths.reports, "ablation_table.txt")
    table_csv = os.path.join(paths.reports, "ablation_table.csv")
    with open(table_txt, "w", encoding="utf-8") as f:
        f.write(render_table(reports) + "\n")
    table_to_csv(reports, table_csv)
    log(_STAGE, "\n" + render_table(reports))
    return [paths.ablation_report, table_txt, table_csv]


def run_ablation(cfg: PipelineConfig, force: bool = False) -> RunSummary:
    """
    Data stages, then the plain RMSE / LDS / LDS + time reversal SpO2 runs.

    The variants share the [train_spo2] budget and seed, start from scratch,
    and are scored on the evaluation split. Results land in
    ``reports/ablation.json`` and ``reports/ablation_table.{txt,csv}``.
    """
    summary = run_pipeline(cfg, DATA_STAGES, force=force)
    paths = RunPaths(cfg.run.out)
    digest = ablation_digest(cfg)
    summary.digests[ABLATE] = digest
    if not (force or summary.executed) and _cached(paths, ABLATE, digest):
        log(_STAGE, f"{ABLATE}: cached ({digest[:12]})")
        summary.cached.append(ABLATE)
        return summary

    log(_STAGE, f"{ABLATE}: running")
    outputs = _ablate(cfg, paths)
    _record(paths, ABLATE, digest, outputs)
    summary.executed.append(ABLATE)
    summary.outputs[ABLATE] = outputs
    return summary

import json
import os
from dataclasses import replace

import pandas as pd
import pytest

from pulseface.manifest import Manifest, validate_manifest
from pulseface.pipeline import ABLATE, DATA_STAGES, STAGES, RunPaths, run_ablation, run_pipeline, run_stage, stage_digests
from pulseface.tools.config import PipelineConfig, parse_config


def _smoke_config(out) -> PipelineConfig:
    return parse_config(
        {
            "run": {"out": str(out), "seed": 5},
            "synth": {"n_subjects": 3, "clip_seconds": 4.0, "frame_size": [64, 64], "rotation_bins": [0]},
            "preprocess": {"crop_size": 16},
            "model": {"size": 16, "channels": [2, 3, 3, 4], "feature_dim": 6},
            "train_hr": {"epochs": 1, "batch_size": 2},
            "train_spo2": {"epochs": 1, "batch_size": 2},
            "eval": {"windows_s": [2.0, 4.0]},
        }
    )


def test_digests_are_chained():
    base = PipelineConfig()
    a = stage_digests(base)
    b = stage_digests(replace(base, train_hr=replace(base.train_hr, epochs=3)))
    for stage in ("synth-gen", "preprocess", "denoise"):
        assert a[stage] == b[stage]
    for stage in ("train-hr", "train-spo2", "predict", "eval", "plot"):
        assert a[stage] != b[stage]
    assert len(set(a.values())) == len(STAGES)


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = _smoke_config(out)
    return cfg, run_pipeline(cfg)


def test_pipeline_runs_every_stage(smoke_run):
    cfg, summary = smoke_run
    assert summary.executed == list(STAGES)
    paths = RunPaths(cfg.run.out)
    for path in (paths.manifest, paths.hr_model, paths.spo2_model, paths.predictions, paths.eval_report):
        assert os.path.exists(path), path
    for name in ("hr_scatter.svg", "hr_bland_altman.svg", "spo2_scatter.svg", "spo2_bland_altman.csv"):
        assert os.path.exists(os.path.join(paths.plots, name))
    with open(os.path.join(cfg.run.out, "config.json"), encoding="utf-8") as f:
        assert json.load(f)["run"]["seed"] == 5


def test_pipeline_outputs_are_consistent(smoke_run):
    cfg, _ = smoke_run
    paths = RunPaths(cfg.run.out)
    manifest = Manifest.load(paths.manifest)
    validate_manifest(manifest)
    assert all(clip.aligned_path and clip.cleaned_ppg_path for clip in manifest.clips())

    frame = pd.read_csv(paths.predictions)
    assert list(frame.columns) == ["clip_id", "window", "hr_ref", "hr_pred", "spo2_ref", "spo2_pred"]
    assert len(frame) == len(manifest.windows("test"))

    with open(paths.eval_report, encoding="utf-8") as f:
        report = json.load(f)
    assert [r["tw_seconds"] for r in report["hr"]] == [2.0, 4.0]
    assert report["spo2"]["n_windows"] == len(frame)


def test_second_run_is_cached(smoke_run):
    cfg, _ = smoke_run
    summary = run_pipeline(cfg)
    assert summary.executed == []
    assert summary.cached == list(STAGES)


def test_changed_eval_reruns_only_downstream(smoke_run):
    cfg, _ = smoke_run
    changed = replace(cfg, eval=replace(cfg.eval, windows_s=(2.0,)))
    summary = run_pipeline(changed)
    assert summary.cached == ["synth-gen", "preprocess", "denoise", "train-hr", "train-spo2"]
    assert summary.executed == ["predict", "eval", "plot"]
    run_pipeline(cfg)


def test_forced_stage_reruns(smoke_run):
    cfg, _ = smoke_run
    summary = run_stage("plot", cfg, force=True)
    assert summary.executed == ["plot"]


def test_ablation_writes_paired_reports_and_caches(tmp_path):
    cfg = _smoke_config(tmp_path / "ablate")
    summary = run_ablation(cfg)
    assert summary.executed == [*DATA_STAGES, ABLATE]
    paths = RunPaths(cfg.run.out)
    with open(paths.ablation_report, encoding="utf-8") as f:
        results = json.load(f)
    assert [r["name"] for r in results] == ["rmse", "lds", "lds+tr"]
    n_test = len(Manifest.load(paths.manifest).windows("test"))
    assert all(r["report"]["n_windows"] == n_test for r in results)
    table = pd.read_csv(os.path.join(paths.reports, "ablation_table.csv"))
    assert list(table["label"]) == ["SpO2 (rmse)", "SpO2 (lds)", "SpO2 (lds+tr)"]

    again = run_ablation(cfg)
    assert again.executed == []
    assert again.cached == [*DATA_STAGES, ABLATE]

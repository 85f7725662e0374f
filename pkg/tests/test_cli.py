"""Exercises every command line entry point on a miniature benchmark."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from driftadapt.cli import main
from driftadapt.datasets import load_dataset, load_task

TINY_TOML = """
[run]
modality = "image"
strategies = ["advda"]
include_bounds = false

[selection]
confidence_threshold = 0.5

[step1]
epochs = 2

[outliers]
method = "mahalanobis"
pca_dims = 6

[adaptation]
epochs = 2

[benchmark]
modality = "image"
class_count = 2
per_class = 12
drift = 0.6
"""


@pytest.fixture(scope="module")
def sandbox(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.toml"
    config.write_text(TINY_TOML)
    return root, config


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


def run_ok(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def task_dir(sandbox, runner):
    root, config = sandbox
    out = root / "bench"
    run_ok(runner, ["gen-benchmark", "-c", str(config), "--seed", "3",
                    "-o", str(out), "--layout", "task"])
    return out


@pytest.fixture(scope="module")
def step1_dir(sandbox, runner, task_dir):
    root, config = sandbox
    out = root / "step1"
    run_ok(runner, ["train-step1", "-c", str(config), "--seed", "3",
                    "-o", str(out), "--data", str(task_dir)])
    return out


@pytest.fixture(scope="module")
def selection_dir(sandbox, runner, task_dir, step1_dir):
    root, config = sandbox
    out = root / "selection"
    run_ok(runner, ["select", "-c", str(config), "--seed", "3", "-o", str(out),
                    "--step1", str(step1_dir), "--data", str(task_dir)])
    return out


class TestGenBenchmark:
    def test_task_layout(self, task_dir):
        task = load_task(task_dir)
        assert len(task.source_train) == 18
        assert len(task.target_train) == 12
        assert task.target_train.has_hidden_labels
        assert (task_dir / "manifest.json").exists()

    def test_months_layout(self, sandbox, runner):
        root, config = sandbox
        out = root / "months"
        run_ok(runner, ["gen-benchmark", "-c", str(config), "--seed", "3",
                        "-o", str(out), "--layout", "months", "--months", "5"])
        with open(out / "months.json") as fh:
            names = json.load(fh)["months"]
        assert names == [f"month_{i:02d}" for i in range(5)]
        ds = load_dataset(out / "months" / "month_00")
        assert ds.modality == "image"
        assert len(ds) == 24

    def test_clusters_layout(self, sandbox, runner):
        root, config = sandbox
        out = root / "clusters"
        run_ok(runner, ["gen-benchmark", "-c", str(config), "--seed", "3",
                        "-o", str(out), "--layout", "clusters", "--clusters", "3"])
        with open(out / "clusters.json") as fh:
            names = json.load(fh)["clusters"]
        assert len(names) == 3
        benign = load_dataset(out / "benign")
        assert set(benign.labels()) == {0}


class TestConvertBytes:
    def test_converts_directory(self, sandbox, runner):
        root, _ = sandbox
        raw = root / "raw"
        raw.mkdir()
        rng = np.random.default_rng(12)
        for i, size in enumerate([800, 3000, 12000]):
            (raw / f"bin_{i}.dat").write_bytes(rng.bytes(size))
        labels = root / "labels.csv"
        labels.write_text("sample_key,label\nbin_0,0\nbin_1,1\nbin_2,0\n")
        out = root / "converted"
        result = run_ok(runner, ["convert-bytes", "--input", str(raw),
                                 "-o", str(out), "--labels", str(labels)])
        assert "3 files converted" in result.output
        ds = load_dataset(out)
        assert len(ds) == 3 and ds.modality == "image"
        px = ds.images()
        assert px.shape == (3, 56, 56)
        assert px.min() >= 0.0 and px.max() <= 1.0
        assert dict(zip(ds.keys(), ds.labels()))["bin_1"] == 1

    def test_empty_directory_fails(self, sandbox, runner):
        root, _ = sandbox
        empty = root / "empty"
        empty.mkdir()
        result = runner.invoke(main, ["convert-bytes", "--input", str(empty)])
        assert result.exit_code != 0
        assert "no files found" in result.output


class TestTrainStep1:
    def test_artifacts(self, step1_dir):
        for name in ("step1_outputs.csv", "direps.npy", "step1_model.npz",
                     "step1_history.csv", "step1_metrics.json", "manifest.json"):
            assert (step1_dir / name).exists(), name
        with open(step1_dir / "step1_metrics.json") as fh:
            metrics = json.load(fh)
        assert 0.0 <= metrics["target_test"]["accuracy"] <= 1.0

    def test_rerun_is_byte_identical(self, sandbox, runner, task_dir, step1_dir):
        root, config = sandbox
        again = root / "step1_again"
        run_ok(runner, ["train-step1", "-c", str(config), "--seed", "3",
                        "-o", str(again), "--data", str(task_dir)])
        for name in ("step1_outputs.csv", "step1_history.csv",
                     "step1_metrics.json", "direps.npy"):
            assert (again / name).read_bytes() == (step1_dir / name).read_bytes(), name


class TestSelect:
    def test_artifacts_and_echo(self, selection_dir):
        assert (selection_dir / "selection.csv").exists()
        with open(selection_dir / "selection_summary.json") as fh:
            summary = json.load(fh)
        assert 0.0 <= summary["coverage"] <= 1.0

    def test_threshold_override_changes_outcome(self, sandbox, runner, task_dir,
                                                step1_dir):
        root, config = sandbox
        out = root / "selection_strict"
        result = run_ok(runner, ["select", "-c", str(config), "--seed", "3",
                                 "-o", str(out), "--step1", str(step1_dir),
                                 "--data", str(task_dir),
                                 "--threshold", "0.6", "--method", "lof"])
        assert "kept" in result.output
        with open(out / "manifest.json") as fh:
            manifest = json.load(fh)
        assert manifest["config"]["confidence_threshold"] == 0.6
        assert manifest["config"]["outliers"]["method"] == "lof"


class TestAdapt:
    def test_advda_image(self, sandbox, runner, task_dir, selection_dir):
        root, config = sandbox
        out = root / "adapted"
        result = run_ok(runner, ["adapt", "-c", str(config), "--seed", "3",
                                 "-o", str(out), "--data", str(task_dir),
                                 "--selection", str(selection_dir),
                                 "--strategy", "advda"])
        assert "target accuracy" in result.output
        with open(out / "metrics.json") as fh:
            payload = json.load(fh)
        assert payload["strategy"] == "advda"
        assert payload["modality"] == "image"
        assert (out / "model.npz").exists()
        assert (out / "history.csv").exists()

    def test_upper_bound_needs_oracle_flag(self, sandbox, runner, task_dir,
                                           selection_dir):
        root, config = sandbox
        result = runner.invoke(main, [
            "adapt", "-c", str(config), "--seed", "3",
            "-o", str(root / "ub"), "--data", str(task_dir),
            "--selection", str(selection_dir), "--strategy", "upper_bound",
        ])
        assert result.exit_code != 0
        assert isinstance(result.exception, PermissionError)

    def test_upper_bound_with_oracle_flag(self, sandbox, runner, task_dir,
                                          selection_dir):
        root, config = sandbox
        out = root / "ub_ok"
        run_ok(runner, ["adapt", "-c", str(config), "--seed", "3",
                        "-o", str(out), "--data", str(task_dir),
                        "--selection", str(selection_dir),
                        "--strategy", "upper_bound", "--allow-oracle-labels"])
        with open(out / "metrics.json") as fh:
            payload = json.load(fh)
        purposes = [event["purpose"] for event in payload["audit"]]
        assert "upper_bound_finetune" in purposes


class TestEvaluate:
    def test_scores_dataset_directory(self, sandbox, runner, task_dir, step1_dir):
        root, _ = sandbox
        dest = root / "eval.json"
        result = run_ok(runner, ["evaluate",
                                 "--model", str(step1_dir / "step1_model.npz"),
                                 "--data", str(task_dir / "source_test"),
                                 "-o", str(dest)])
        echoed = json.loads(result.output)
        with open(dest) as fh:
            stored = json.load(fh)
        assert stored == echoed
        assert 0.0 <= stored["accuracy"] <= 1.0
        assert stored["n"] == 6


class TestRunPipeline:
    def test_end_to_end(self, sandbox, runner, task_dir):
        root, config = sandbox
        out = root / "pipeline"
        result = run_ok(runner, ["run-pipeline", "-c", str(config), "--seed", "3",
                                 "-o", str(out), "--data", str(task_dir)])
        assert "target-test accuracy" in result.output
        with open(out / "report.json") as fh:
            report = json.load(fh)
        assert "advda" in report["strategies"]
        assert report["seed"] == 3


class TestRunRolling:
    def test_rolling_protocol(self, sandbox, runner):
        root, config = sandbox
        months = root / "months_roll"
        run_ok(runner, ["gen-benchmark", "-c", str(config), "--seed", "6",
                        "-o", str(months), "--layout", "months", "--months", "5"])
        out = root / "rolling"
        result = run_ok(runner, ["run-rolling", "-c", str(config), "--seed", "6",
                                 "-o", str(out), "--data", str(months),
                                 "--source-months", "3"])
        assert "mean target-test accuracy" in result.output
        with open(out / "report.json") as fh:
            report = json.load(fh)
        assert [rep["task"] for rep in report["tasks"]] == ["month_03->month_04"]
        series = (out / "series.csv").read_text().splitlines()
        assert series[0] == "task,strategy,accuracy,macro_f1"
        assert len(series) == 1 + 2  # step1 + advda for the single task

    def test_missing_months_fail(self, sandbox, runner):
        root, config = sandbox
        empty = root / "no_months"
        empty.mkdir()
        result = runner.invoke(main, ["run-rolling", "-c", str(config),
                                      "--data", str(empty)])
        assert result.exit_code != 0
        assert "no month_" in result.output


class TestRunLoco:
    def test_single_holdout(self, sandbox, runner):
        root, config = sandbox
        clusters = root / "clusters_loco"
        run_ok(runner, ["gen-benchmark", "-c", str(config), "--seed", "8",
                        "-o", str(clusters), "--layout", "clusters",
                        "--clusters", "3"])
        out = root / "loco"
        run_ok(runner, ["run-loco", "-c", str(config), "--seed", "8",
                        "-o", str(out), "--data", str(clusters),
                        "--held-out", "1"])
        with open(out / "report.json") as fh:
            report = json.load(fh)
        assert len(report["tasks"]) == 1
        assert "cluster_1" in report["tasks"][0]["task"]


class TestExportEmbeddings:
    def test_projected_export(self, sandbox, runner, task_dir, step1_dir):
        root, _ = sandbox
        dest = root / "emb.csv"
        result = run_ok(runner, ["export-embeddings",
                                 "--model", str(step1_dir / "step1_model.npz"),
                                 "--data", str(task_dir / "target_test"),
                                 "-o", str(dest), "--pca-dims", "4"])
        assert "12 embeddings" in result.output
        lines = dest.read_text().splitlines()
        assert lines[0].split(",") == [
            "sample_key", "domain", "class", "pc_0", "pc_1", "pc_2", "pc_3"
        ]
        assert len(lines) == 1 + 12

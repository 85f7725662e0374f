"""Command line entry points.

Every command takes ``-c/--config`` (a TOML file; see ``RunConfig``) and a
few flags that override file values; precedence is defaults < file < flags.
Outputs land under ``-o/--out``, falling back to the ``DRIFTADAPT_OUTPUT_DIR``
environment variable, and each run writes a ``manifest.json`` carrying the
resolved configuration and its hash.  Reruns with the same configuration and
seed reproduce the artifacts.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import click

from .adaptation import AdaptationConfig, map_pseudo_labels_to_graphs, run_strategy
from .config import load_run_config, write_manifest
from .datasets import (
    BenchmarkSpec,
    LabelAudit,
    bytes_to_image,
    build_rolling_tasks,
    load_dataset,
    load_task,
    make_benchmark_task,
    make_cluster_datasets,
    make_monthly_datasets,
    save_dataset,
    save_task,
    DomainDataset,
)
from .evaluation import (
    evaluate,
    export_embeddings,
    run_leave_one_cluster_out,
    run_pipeline,
    run_rolling,
    write_pipeline_artifacts,
)
from .maxdirep import StepOneOutputs, infer_target, train_step_one, write_history_csv
from .modelio import load_model, save_model
from .outliers import OutlierConfig
from .selection import (
    load_selection,
    pseudo_label_accuracy,
    pseudo_labeled_subset,
    save_selection,
    select_pseudo_labels,
)


@click.group()
def main():
    """Drift adaptation pipeline: benchmarks, training, selection, protocols."""


_config_opt = click.option(
    "-c", "--config", "config_path", type=click.Path(exists=True, dir_okay=False),
    default=None, help="TOML configuration file.",
)
_seed_opt = click.option("--seed", type=int, default=None, help="Override the seed.")
_out_opt = click.option(
    "-o", "--out", type=click.Path(file_okay=False), default=None,
    help="Output directory (default: $DRIFTADAPT_OUTPUT_DIR or ./runs).",
)


def _resolve(config_path, seed=None, out=None, **extra):
    overrides = {k: v for k, v in extra.items() if v is not None}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["output_dir"] = str(out)
    return load_run_config(config_path, overrides)


def _outdir(cfg, default_name):
    out = cfg.resolved_output_dir() / default_name if cfg.output_dir is None else Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


@main.command("gen-benchmark")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--layout", type=click.Choice(["task", "months", "clusters"]),
              default="task", show_default=True,
              help="task: one adaptation task; months: rolling snapshots; "
                   "clusters: malware families plus a benign pool.")
@click.option("--months", type=int, default=9, show_default=True)
@click.option("--clusters", type=int, default=4, show_default=True)
def gen_benchmark(config_path, seed, out, layout, months, clusters):
    """Generate a synthetic drifted benchmark on disk."""
    cfg = _resolve(config_path, seed, out)
    spec = BenchmarkSpec.from_mapping(cfg.benchmark)
    outdir = _outdir(cfg, "benchmark")
    if layout == "task":
        save_task(make_benchmark_task(spec, cfg.seed), outdir)
    elif layout == "months":
        monthly = make_monthly_datasets(spec, cfg.seed, months)
        for ds in monthly:
            save_dataset(ds, outdir / "months" / ds.name)
        with open(outdir / "months.json", "w") as fh:
            json.dump({"months": [ds.name for ds in monthly]}, fh, indent=2)
            fh.write("\n")
    else:
        fams, benign = make_cluster_datasets(spec, cfg.seed, clusters)
        for ds in fams:
            save_dataset(ds, outdir / ds.name)
        save_dataset(benign, outdir / "benign")
        with open(outdir / "clusters.json", "w") as fh:
            json.dump({"clusters": [ds.name for ds in fams]}, fh, indent=2)
            fh.write("\n")
    write_manifest(cfg, outdir, {"layout": layout})
    click.echo(f"benchmark written to {outdir}")


@main.command("convert-bytes")
@click.option("--input", "input_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory of raw binary files.")
@_out_opt
@click.option("--labels", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Optional CSV (sample_key,label) keyed by file stem.")
@click.option("--class-count", type=int, default=2, show_default=True)
@click.option("--domain", type=click.Choice(["source", "target"]), default="source",
              show_default=True)
def convert_bytes(input_dir, out, labels, class_count, domain):
    """Render raw binaries into a 56x56 image dataset directory."""
    label_map = {}
    if labels:
        with open(labels, newline="") as fh:
            for row in csv.DictReader(fh):
                label_map[row["sample_key"]] = int(row["label"])
    samples = []
    for path in sorted(Path(input_dir).iterdir()):
        if not path.is_file():
            continue
        sample = bytes_to_image(path.read_bytes(), key=path.stem, domain=domain)
        sample.label = label_map.get(path.stem)
        samples.append(sample)
    if not samples:
        raise click.ClickException(f"no files found under {input_dir}")
    ds = DomainDataset(Path(input_dir).name, "image", samples, class_count)
    outdir = Path(out) if out else Path("runs") / "converted"
    save_dataset(ds, outdir)
    click.echo(f"{len(samples)} files converted into {outdir}")


@main.command("train-step1")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Task directory from gen-benchmark.")
def train_step1(config_path, seed, out, data_dir):
    """Train the Step-I model and infer target pseudo-labels."""
    cfg = _resolve(config_path, seed, out)
    task = load_task(data_dir)
    outdir = _outdir(cfg, "step1")
    model = train_step_one(
        task.source_train, task.target_train, val=task.source_test,
        seed=cfg.seed, **cfg.step1,
    )
    outputs = infer_target(model, task.target_train)
    outputs.save(outdir)
    save_model(model, outdir / "step1_model.npz")
    write_history_csv(model.history_, outdir / "step1_history.csv")
    metrics = {
        "source_test": evaluate(model, task.source_test).to_dict(),
        "target_test": evaluate(model, task.target_test).to_dict(),
    }
    with open(outdir / "step1_metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(cfg, outdir)
    click.echo(
        f"step1 target accuracy {metrics['target_test']['accuracy']:.4f}, "
        f"artifacts in {outdir}"
    )


@main.command("select")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--step1", "step1_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory with Step-I outputs.")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              default=None, help="Task directory; enables pseudo-label scoring "
                                 "against hidden labels.")
@click.option("--method", type=str, default=None, help="Override outlier method.")
@click.option("--threshold", type=float, default=None,
              help="Override the confidence threshold.")
def select(config_path, seed, out, step1_dir, data_dir, method, threshold):
    """Filter pseudo-labels by confidence and per-class outlier checks."""
    overrides = {}
    if method is not None:
        overrides["outliers"] = {"method": method}
    if threshold is not None:
        overrides["confidence_threshold"] = threshold
    cfg = _resolve(config_path, seed, out, **overrides)
    outputs = StepOneOutputs.load(step1_dir)
    outlier_cfg = OutlierConfig(**{"seed": cfg.seed, **cfg.outliers})
    result = select_pseudo_labels(
        outputs, outlier_cfg, confidence_threshold=cfg.confidence_threshold
    )
    if data_dir:
        task = load_task(data_dir)
        if task.target_train.has_hidden_labels:
            audit = LabelAudit()
            truth = task.target_train.hidden_truth(audit, "selection_scoring")
            pseudo_label_accuracy(result, truth, weight=cfg.acs_weight)
    outdir = _outdir(cfg, "selection")
    save_selection(result, outdir)
    write_manifest(cfg, outdir)
    msg = f"kept {int(result.kept.sum())}/{len(result)} (coverage {result.coverage:.3f}"
    if result.accuracy is not None:
        msg += f", accuracy {result.accuracy:.3f}, score {result.acs:.3f}"
    click.echo(msg + f") -> {outdir}")


@main.command("adapt")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--selection", "selection_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory with selection.csv from `select`.")
@click.option("--strategy", type=str, required=True,
              help='Strategy, optionally with modality: "advda", "warm_start:graph", ...')
@click.option("--allow-oracle-labels", is_flag=True, default=None,
              help="Grant the upper bound access to evaluation labels.")
def adapt(config_path, seed, out, data_dir, selection_dir, strategy,
          allow_oracle_labels):
    """Train one Step-III strategy from stored selection results."""
    cfg = _resolve(config_path, seed, out,
                   allow_oracle_labels=allow_oracle_labels)
    task = load_task(data_dir)
    result = load_selection(selection_dir)
    name, _, modality = strategy.partition(":")
    modality = modality or cfg.modality
    if modality == "image":
        source, raw, test = task.source_train, task.target_train, task.target_test
        pseudo = pseudo_labeled_subset(result, task.target_train)
    else:
        if not task.has_graphs:
            raise click.ClickException("task directory has no graph views")
        source, raw, test = (
            task.graph_source_train, task.graph_target_train, task.graph_target_test,
        )
        pseudo, _report = map_pseudo_labels_to_graphs(result, task.graph_target_train)
    outdir = _outdir(cfg, f"adapt_{name}_{modality}")
    base = AdaptationConfig(
        strategy=name, modality=modality, seed=cfg.seed,
        log_path=str(outdir / "history.csv"), **cfg.adaptation,
    )
    audit = LabelAudit()
    model = run_strategy(
        name, source, pseudo, raw, base,
        audit=audit, allow_oracle_labels=cfg.allow_oracle_labels,
    )
    save_model(model, outdir / "model.npz")
    metrics = evaluate(model, test)
    payload = {
        "strategy": name, "modality": modality, "seed": cfg.seed,
        "accuracy": metrics.accuracy, "macro_f1": metrics.macro_f1,
        "target_test": metrics.to_dict(), "audit": audit.to_list(),
    }
    with open(outdir / "metrics.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(cfg, outdir)
    click.echo(f"{strategy}: target accuracy {metrics.accuracy:.4f} -> {outdir}")


@main.command("evaluate")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="Model checkpoint (.npz).")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Dataset directory to score.")
@click.option("-o", "--out", type=click.Path(dir_okay=False), default=None,
              help="Optional metrics JSON path.")
def evaluate_cmd(model_path, data_dir, out):
    """Score a stored model on a labeled dataset directory."""
    model = load_model(model_path)
    ds = load_dataset(data_dir)
    metrics = evaluate(model, ds)
    payload = metrics.to_dict()
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


@main.command("run-pipeline")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Task directory.")
def run_pipeline_cmd(config_path, seed, out, data_dir):
    """Steps I-III end to end on one task directory."""
    cfg = _resolve(config_path, seed, out)
    task = load_task(data_dir)
    result = run_pipeline(task, cfg)
    outdir = _outdir(cfg, "pipeline")
    write_pipeline_artifacts(result, outdir)
    write_manifest(cfg, outdir)
    lines = [
        f"  step1              {result.report['step1']['target_test']['accuracy']:.4f}"
    ]
    for entry, block in result.report["strategies"].items():
        lines.append(f"  {entry:<18} {block['target_test']['accuracy']:.4f}")
    click.echo("target-test accuracy:\n" + "\n".join(lines))
    click.echo(f"artifacts in {outdir}")


@main.command("run-rolling")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory containing months/month_* datasets.")
@click.option("--source-months", type=int, default=3, show_default=True)
def run_rolling_cmd(config_path, seed, out, data_dir, source_months):
    """Rolling updates: adapt on month m, evaluate on month m+1."""
    cfg = _resolve(config_path, seed, out)
    months_dir = Path(data_dir) / "months"
    if not months_dir.is_dir():
        months_dir = Path(data_dir)
    monthly = [
        load_dataset(p) for p in sorted(months_dir.iterdir())
        if p.is_dir() and p.name.startswith("month_")
    ]
    if not monthly:
        raise click.ClickException(f"no month_* datasets under {months_dir}")
    tasks = build_rolling_tasks(monthly, source_months=source_months, seed=cfg.seed)
    report = run_rolling(tasks, cfg)
    outdir = _outdir(cfg, "rolling")
    _write_protocol_report(report, outdir)
    write_manifest(cfg, outdir, {"source_months": source_months})
    _echo_aggregate(report)
    click.echo(f"artifacts in {outdir}")


@main.command("run-loco")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory with cluster_* datasets and benign/.")
@click.option("--held-out", type=int, default=None,
              help="Single cluster to hold out (default: each in turn).")
def run_loco_cmd(config_path, seed, out, data_dir, held_out):
    """Leave-one-cluster-out: each malware family becomes the drifted target."""
    cfg = _resolve(config_path, seed, out)
    root = Path(data_dir)
    clusters = [
        load_dataset(p) for p in sorted(root.iterdir())
        if p.is_dir() and p.name.startswith("cluster_")
    ]
    if not clusters:
        raise click.ClickException(f"no cluster_* datasets under {root}")
    benign = load_dataset(root / "benign")
    report = run_leave_one_cluster_out(clusters, benign, cfg, held_out=held_out)
    outdir = _outdir(cfg, "loco")
    _write_protocol_report(report, outdir)
    write_manifest(cfg, outdir, {"held_out": held_out})
    _echo_aggregate(report)
    click.echo(f"artifacts in {outdir}")


@main.command("export-embeddings")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("-o", "--out", type=click.Path(dir_okay=False), required=True,
              help="Destination CSV.")
@click.option("--pca-dims", type=int, default=None,
              help="Project embeddings to this many principal components.")
def export_embeddings_cmd(model_path, data_dir, out, pca_dims):
    """Dump backbone embeddings for offline visualization."""
    model = load_model(model_path)
    ds = load_dataset(data_dir)
    export_embeddings(model, ds, out, pca_dims=pca_dims)
    click.echo(f"{len(ds)} embeddings written to {out}")


def _write_protocol_report(report, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(outdir / "series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "strategy", "accuracy", "macro_f1"])
        for rep in report["tasks"]:
            w.writerow([
                rep["task"], "step1",
                f"{rep['step1']['target_test']['accuracy']:.9g}",
                f"{rep['step1']['target_test']['macro_f1']:.9g}",
            ])
            for entry, block in rep["strategies"].items():
                w.writerow([
                    rep["task"], entry,
                    f"{block['target_test']['accuracy']:.9g}",
                    f"{block['target_test']['macro_f1']:.9g}",
                ])


def _echo_aggregate(report):
    click.echo("mean target-test accuracy over tasks:")
    for entry, block in sorted(report["aggregate"].items()):
        click.echo(f"  {entry:<18} {block['mean_accuracy']:.4f}")


if __name__ == "__main__":
    main()

"""Step II: decide which pseudo-labels are trustworthy enough to train on.

Samples are grouped by pseudo-class; inside each group an outlier detector
runs on PCA-reduced invariant features (the projection is fitted once on the
whole target set), and a sample is kept only if its softmax confidence clears
the threshold *and* it is not flagged.  Groups too small to score fall back
to the confidence rule alone.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datasets import DomainDataset
from .outliers import PcaReducer, detect_outliers

MIN_GROUP_FOR_OUTLIERS = 5


@dataclass
class SelectionResult:
    """Per-sample selection record plus the headline numbers."""

    sample_keys: list
    pseudo_label: np.ndarray    # (N,) int64
    confidence: np.ndarray      # (N,) float64
    outlier_score: np.ndarray   # (N,) float64, NaN where no detector ran
    outlier: np.ndarray         # (N,) bool
    kept: np.ndarray            # (N,) bool
    confidence_threshold: float
    method: str
    warnings: list = field(default_factory=list)
    accuracy: float | None = None  # set by pseudo_label_accuracy
    acs: float | None = None

    def __len__(self):
        return len(self.sample_keys)

    @property
    def coverage(self):
        return float(self.kept.mean()) if len(self.kept) else 0.0

    def kept_keys(self):
        return [k for k, keep in zip(self.sample_keys, self.kept) if keep]

    def kept_labels(self):
        """{sample_key: pseudo_label} over the kept set."""
        return {
            k: int(p)
            for k, p, keep in zip(self.sample_keys, self.pseudo_label, self.kept)
            if keep
        }


def select_pseudo_labels(outputs, outlier_config, confidence_threshold=0.95):
    """Confidence + per-class outlier filtering of Step-I pseudo-labels."""
    if not 0.0 < confidence_threshold <= 1.0:
        raise ValueError("confidence_threshold must lie in (0, 1]")
    n = len(outputs)
    if n == 0:
        raise ValueError("no Step-I outputs to select from")
    scores = np.full(n, np.nan)
    flagged = np.zeros(n, dtype=bool)
    notes = []
    dims = min(outlier_config.pca_dims, n, outputs.direp.shape[1])
    if dims < outlier_config.pca_dims:
        msg = (
            f"projection capped at {dims} dimensions "
            f"({n} samples x {outputs.direp.shape[1]} features)"
        )
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    reduced = PcaReducer(dims).fit(outputs.direp).transform(outputs.direp)
    for cls in np.unique(outputs.pseudo_label):
        idx = np.flatnonzero(outputs.pseudo_label == cls)
        if len(idx) < MIN_GROUP_FOR_OUTLIERS:
            msg = (
                f"pseudo-class {cls} has only {len(idx)} samples; "
                "outlier filtering skipped, confidence rule only"
            )
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
            continue
        verdicts = detect_outliers(reduced[idx], outlier_config)
        scores[idx] = verdicts.scores
        flagged[idx] = verdicts.outlier
    kept = (outputs.confidence >= confidence_threshold) & ~flagged
    if not kept.any():
        raise ValueError(
            "selection kept zero samples; lower confidence_threshold or the "
            "outlier fraction"
        )
    return SelectionResult(
        sample_keys=list(outputs.sample_keys),
        pseudo_label=outputs.pseudo_label.copy(),
        confidence=outputs.confidence.copy(),
        outlier_score=scores,
        outlier=flagged,
        kept=kept,
        confidence_threshold=confidence_threshold,
        method=outlier_config.method,
        warnings=notes,
    )


def acs(accuracy, coverage, weight=0.5):
    """Weighted accuracy/coverage combination, same units in as out."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError("weight must lie in [0, 1]")
    return weight * accuracy + (1.0 - weight) * coverage


def pseudo_label_accuracy(result, truth, weight=0.5):
    """Accuracy of the kept pseudo-labels against evaluation-only truth.

    ``truth`` maps sample_key to true class (obtain it through a dataset's
    audited ``hidden_truth``).  Also fills in the result's combined score.
    """
    kept = result.kept_labels()
    if not kept:
        raise ValueError("selection kept zero samples; nothing to score")
    hits = sum(1 for k, p in kept.items() if truth[k] == p)
    result.accuracy = hits / len(kept)
    result.acs = acs(result.accuracy, result.coverage, weight)
    return result.accuracy


def pseudo_labeled_subset(result, dataset, name=None):
    """Kept samples of ``dataset`` relabeled with their pseudo-labels.

    Works for image or graph datasets as long as the keys line up; the
    returned dataset carries no hidden labels (training must not see them).
    """
    kept = result.kept_labels()
    by_key = {s.key: i for i, s in enumerate(dataset.samples)}
    missing = [k for k in kept if k not in by_key]
    if missing:
        raise KeyError(
            f"{len(missing)} kept keys missing from dataset {dataset.name!r}, "
            f"first: {missing[0]!r}"
        )
    sub = dataset.subset([by_key[k] for k in kept], name=name or dataset.name + ".kept")
    samples = [replace(s, label=kept[s.key]) for s in sub.samples]
    return DomainDataset(sub.name, sub.modality, samples, dataset.class_count)


def selection_to_csv(result, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["sample_key", "pseudo_label", "confidence", "outlier_score",
             "outlier", "kept"]
        )
        for i, key in enumerate(result.sample_keys):
            s = result.outlier_score[i]
            w.writerow(
                [key, int(result.pseudo_label[i]), f"{result.confidence[i]:.9g}",
                 "" if np.isnan(s) else f"{s:.9g}",
                 int(result.outlier[i]), int(result.kept[i])]
            )


def selection_summary(result):
    per_class = {}
    for cls in np.unique(result.pseudo_label):
        mask = result.pseudo_label == cls
        per_class[int(cls)] = {
            "total": int(mask.sum()),
            "kept": int((mask & result.kept).sum()),
        }
    return {
        "method": result.method,
        "confidence_threshold": result.confidence_threshold,
        "coverage": result.coverage,
        "kept": int(result.kept.sum()),
        "total": len(result),
        "per_class": per_class,
        "accuracy": result.accuracy,
        "acs": result.acs,
        "warnings": list(result.warnings),
    }


def save_selection(result, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    selection_to_csv(result, d / "selection.csv")
    with open(d / "selection_summary.json", "w") as fh:
        json.dump(selection_summary(result), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_selection(directory):
    """Rehydrate a SelectionResult from its CSV + JSON pair."""
    d = Path(directory)
    keys, pseudo, conf, score, flag, kept = [], [], [], [], [], []
    with open(d / "selection.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            keys.append(row["sample_key"])
            pseudo.append(int(row["pseudo_label"]))
            conf.append(float(row["confidence"]))
            score.append(float(row["outlier_score"]) if row["outlier_score"] else np.nan)
            flag.append(bool(int(row["outlier"])))
            kept.append(bool(int(row["kept"])))
    with open(d / "selection_summary.json") as fh:
        summary = json.load(fh)
    return SelectionResult(
        sample_keys=keys,
        pseudo_label=np.asarray(pseudo, dtype=np.int64),
        confidence=np.asarray(conf, dtype=np.float64),
        outlier_score=np.asarray(score, dtype=np.float64),
        outlier=np.asarray(flag, dtype=bool),
        kept=np.asarray(kept, dtype=bool),
        confidence_threshold=summary["confidence_threshold"],
        method=summary["method"],
        warnings=summary.get("warnings", []),
        accuracy=summary.get("accuracy"),
        acs=summary.get("acs"),
    )

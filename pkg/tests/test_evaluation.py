"""Metric oracles (hand-recounted confusion arithmetic) and export format."""

from __future__ import annotations

import numpy as np
import pytest

from driftadapt.adaptation import AdaptationConfig, SupervisedClassifier
from driftadapt.datasets import BenchmarkSpec, make_drift_benchmark
from driftadapt.evaluation import (
    Metrics,
    aggregate_reports,
    compute_metrics,
    evaluate,
    export_embeddings,
)


def recount_metrics(y_true, y_pred, n_classes):
    """Independent recount via per-class precision/recall."""
    n = len(y_true)
    accuracy = sum(int(t == p) for t, p in zip(y_true, y_pred)) / n
    f1s = []
    per_class = []
    for c in range(n_classes):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        pred_c = sum(1 for p in y_pred if p == c)
        true_c = sum(1 for t in y_true if t == c)
        if pred_c == 0 and true_c == 0:
            per_class.append(None)
            continue
        precision = tp / pred_c if pred_c else 0.0
        recall = tp / true_c if true_c else 0.0
        f1 = (
            2 * precision * recall / (precision + recall)
            if precision + recall > 0
            else 0.0
        )
        per_class.append(f1)
        f1s.append(f1)
    macro = sum(f1s) / len(f1s) if f1s else 0.0
    return accuracy, macro, per_class


class TestComputeMetrics:
    def test_worked_binary_example(self):
        # confusion [[8, 2], [3, 7]]
        y_true = [0] * 10 + [1] * 10
        y_pred = [0] * 8 + [1] * 2 + [0] * 3 + [1] * 7
        m = compute_metrics(y_true, y_pred, 2)
        assert m.confusion.tolist() == [[8, 2], [3, 7]]
        assert m.accuracy == pytest.approx(0.75)
        assert m.per_class_f1[0] == pytest.approx(16 / 21)
        assert m.per_class_f1[1] == pytest.approx(14 / 19)
        assert m.macro_f1 == pytest.approx((16 / 21 + 14 / 19) / 2)
        assert m.n == 20

    def test_constant_predictor_balanced_binary(self):
        y_true = [0] * 10 + [1] * 10
        y_pred = [0] * 20
        m = compute_metrics(y_true, y_pred, 2)
        assert m.accuracy == pytest.approx(0.5)
        # class 0: tp=10 fp=10 fn=0 -> 2/3; class 1: tp=0 fp=0 fn=10 -> 0
        assert m.per_class_f1[0] == pytest.approx(2 / 3)
        assert m.per_class_f1[1] == 0.0
        assert m.macro_f1 == pytest.approx(1 / 3)

    def test_absent_class_excluded_from_macro(self):
        # class 2 never appears anywhere: NaN slot, macro over the rest
        y_true = [0, 0, 1, 1]
        y_pred = [0, 1, 1, 1]
        m = compute_metrics(y_true, y_pred, 3)
        assert np.isnan(m.per_class_f1[2])
        assert m.per_class_f1[0] == pytest.approx(2 / 3)
        assert m.per_class_f1[1] == pytest.approx(4 / 5)
        assert m.macro_f1 == pytest.approx((2 / 3 + 4 / 5) / 2)

    def test_predicted_only_class_counts_as_zero(self):
        y_true = [0, 0, 0, 0]
        y_pred = [0, 0, 0, 2]
        m = compute_metrics(y_true, y_pred, 3)
        assert m.per_class_f1[2] == 0.0  # fp=1, tp=0
        assert np.isnan(m.per_class_f1[1])
        assert m.macro_f1 == pytest.approx((6 / 7 + 0.0) / 2)

    def test_perfect_predictions(self):
        y = [0, 1, 2, 0, 1, 2]
        m = compute_metrics(y, y, 3)
        assert m.accuracy == 1.0
        assert m.macro_f1 == 1.0
        assert np.all(m.confusion == np.diag([2, 2, 2]))

    @pytest.mark.parametrize("trial", range(5))
    def test_matches_recount_oracle(self, trial):
        rng = np.random.default_rng(trial)
        n_classes = int(rng.integers(2, 6))
        y_true = rng.integers(0, n_classes, size=200)
        y_pred = rng.integers(0, n_classes, size=200)
        m = compute_metrics(y_true, y_pred, n_classes)
        acc, macro, per_class = recount_metrics(y_true, y_pred, n_classes)
        assert m.accuracy == pytest.approx(acc, abs=1e-12)
        assert m.macro_f1 == pytest.approx(macro, abs=1e-12)
        for got, want in zip(m.per_class_f1, per_class):
            if want is None:
                assert np.isnan(got)
            else:
                assert got == pytest.approx(want, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError, match="disagree"):
            compute_metrics([0, 1], [0], 2)
        with pytest.raises(ValueError, match="empty"):
            compute_metrics([], [], 2)
        with pytest.raises(ValueError, match="outside"):
            compute_metrics([0, 2], [0, 1], 2)
        with pytest.raises(ValueError, match="outside"):
            compute_metrics([0, 1], [0, -1], 2)

    def test_to_dict_serializes_nan_as_none(self):
        m = compute_metrics([0, 0], [0, 0], 2)
        d = m.to_dict()
        assert d["per_class_f1"][1] is None
        assert isinstance(d["confusion"], list)


class TestAggregateReports:
    @staticmethod
    def _report(task, advda_acc, step1_acc):
        return {
            "task": task,
            "strategies": {"advda": {"target_test": {"accuracy": advda_acc}}},
            "step1": {"target_test": {"accuracy": step1_acc}},
        }

    def test_mean_and_std_of_series(self):
        reports = [self._report("a", 0.8, 0.7), self._report("b", 0.6, 0.5)]
        agg = aggregate_reports(reports)
        entry = agg["advda"]
        assert entry["accuracy_series"] == [0.8, 0.6]
        assert entry["mean_accuracy"] == pytest.approx(0.7)
        assert entry["std_accuracy"] == pytest.approx(np.std([0.8, 0.6]))
        assert entry["n_tasks"] == 2
        assert agg["step1"]["accuracy_series"] == [0.7, 0.5]
        assert agg["step1"]["mean_accuracy"] == pytest.approx(0.6)

    def test_strategy_missing_from_one_task(self):
        reports = [self._report("a", 0.8, 0.7), self._report("b", 0.6, 0.5)]
        reports[1]["strategies"]["dan"] = {"target_test": {"accuracy": 0.4}}
        agg = aggregate_reports(reports)
        assert agg["dan"] == {
            "accuracy_series": [0.4],
            "mean_accuracy": pytest.approx(0.4),
            "std_accuracy": pytest.approx(0.0),
            "n_tasks": 1,
        }


class TestEvaluateAndExport:
    @pytest.fixture(scope="class")
    def fitted(self):
        spec = BenchmarkSpec(
            modality="graph", class_count=2, per_class=10, nodes_lo=5, nodes_hi=9
        )
        source, target = make_drift_benchmark(spec, seed=17)
        est = SupervisedClassifier(modality="graph", epochs=3, seed=0).fit(
            source.graphs(), source.labels()
        )
        return est, source, target

    def test_evaluate_returns_metrics(self, fitted):
        est, source, _ = fitted
        m = evaluate(est, source)
        assert isinstance(m, Metrics)
        assert m.n == len(source)
        assert 0.0 <= m.accuracy <= 1.0

    def test_export_columns_and_determinism(self, fitted, tmp_path):
        est, source, _ = fitted
        dest = tmp_path / "emb.csv"
        export_embeddings(est, source, dest)
        lines = dest.read_text().splitlines()
        header = lines[0].split(",")
        assert header[:3] == ["sample_key", "domain", "class"]
        assert len(header) == 3 + 128
        assert len(lines) == 1 + len(source)
        again = tmp_path / "emb2.csv"
        export_embeddings(est, source, again)
        assert dest.read_text() == again.read_text()

    def test_export_with_pca(self, fitted, tmp_path):
        est, source, _ = fitted
        dest = tmp_path / "emb_pca.csv"
        export_embeddings(est, source, dest, pca_dims=5)
        header = dest.read_text().splitlines()[0].split(",")
        assert len(header) == 8
        assert header[3] == "pc_0"

    def test_export_blank_class_for_hidden(self, fitted, tmp_path):
        from driftadapt.datasets import hide_labels

        est, source, _ = fitted
        dest = tmp_path / "emb_hidden.csv"
        export_embeddings(est, hide_labels(source), dest)
        first = dest.read_text().splitlines()[1].split(",")
        assert first[2] == ""

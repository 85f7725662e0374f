"""Round-tripping fitted estimators through checkpoint archives."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from driftadapt.adaptation import (
    AdvdaClassifier,
    DanClassifier,
    SupervisedClassifier,
)
from driftadapt.maxdirep import train_step_one
from driftadapt.modelio import load_model, save_model


def _assert_same_modules(a, b):
    assert set(a.modules) == set(b.modules)
    for name in a.modules:
        sa, sb = a.modules[name].state_dict(), b.modules[name].state_dict()
        assert sa.keys() == sb.keys()
        for key in sa:
            assert torch.equal(sa[key], sb[key]), f"{name}.{key} drifted"


@pytest.fixture(scope="module")
def step1_model(tiny_image_task):
    task = tiny_image_task
    return train_step_one(
        task.source_train, task.target_train, epochs=2, seed=41
    ), task


class TestStepOneModel:
    def test_round_trip_is_bit_exact(self, step1_model, tmp_path):
        model, task = step1_model
        path = tmp_path / "step1.npz"
        save_model(model, path)
        back = load_model(path)
        _assert_same_modules(model, back)
        assert back.n_classes_ == model.n_classes_
        assert back.get_params() == model.get_params()
        X = task.target_test.images()
        np.testing.assert_array_equal(back.predict(X), model.predict(X))
        np.testing.assert_allclose(
            back.predict_proba(X), model.predict_proba(X), atol=0
        )


@pytest.fixture(scope="module")
def graph_data(tiny_dual_task):
    task = tiny_dual_task
    return (
        task.graph_source_train.graphs(),
        task.graph_source_train.labels(),
        task.graph_target_train.graphs(),
        task.graph_target_test.graphs(),
    )


class TestGraphEstimators:
    def test_supervised_round_trip(self, graph_data, tmp_path):
        Xs, ys, _, Xt = graph_data
        est = SupervisedClassifier(modality="graph", epochs=2, seed=3).fit(Xs, ys)
        save_model(est, tmp_path / "m.npz")
        back = load_model(tmp_path / "m.npz")
        _assert_same_modules(est, back)
        np.testing.assert_array_equal(back.predict(Xt), est.predict(Xt))
        np.testing.assert_allclose(back.transform(Xt), est.transform(Xt), atol=0)

    @staticmethod
    def _mixed(Xs, ys, Xraw):
        X = list(Xs) + list(Xraw)
        y = np.concatenate([ys, np.full(len(Xraw), -1, dtype=np.int64)])
        domain = np.concatenate(
            [np.zeros(len(Xs), dtype=np.int64), np.ones(len(Xraw), dtype=np.int64)]
        )
        return X, y, domain

    def test_advda_round_trip_keeps_strategy(self, graph_data, tmp_path):
        Xs, ys, Xraw, Xt = graph_data
        X, y, domain = self._mixed(Xs, ys, Xraw)
        est = AdvdaClassifier(modality="graph", seed=4, epochs=2).fit(
            X, y, domain=domain
        )
        save_model(est, tmp_path / "m.npz")
        back = load_model(tmp_path / "m.npz")
        _assert_same_modules(est, back)
        assert back.strategy_ == "advda"
        np.testing.assert_array_equal(back.predict(Xt), est.predict(Xt))

    def test_dan_round_trip(self, graph_data, tmp_path):
        Xs, ys, Xraw, Xt = graph_data
        X, y, domain = self._mixed(Xs, ys, Xraw)
        est = DanClassifier(modality="graph", seed=5, epochs=2).fit(
            X, y, domain=domain
        )
        save_model(est, tmp_path / "m.npz")
        back = load_model(tmp_path / "m.npz")
        _assert_same_modules(est, back)
        np.testing.assert_array_equal(back.predict(Xt), est.predict(Xt))


class TestImageEstimators:
    def test_supervised_image_round_trip(self, tiny_image_task, tmp_path):
        task = tiny_image_task
        est = SupervisedClassifier(modality="image", epochs=1, seed=6).fit(
            task.source_train.images(), task.source_train.labels()
        )
        save_model(est, tmp_path / "m.npz")
        back = load_model(tmp_path / "m.npz")
        _assert_same_modules(est, back)
        X = task.target_test.images()
        np.testing.assert_array_equal(back.predict(X), est.predict(X))


class TestErrors:
    def test_unknown_estimator_rejected(self, tmp_path):
        class Strange:
            pass

        with pytest.raises(TypeError, match="persist"):
            save_model(Strange(), tmp_path / "m.npz")

    def test_unknown_kind_in_manifest_rejected(self, step1_model, tmp_path):
        from driftadapt.nets import load_checkpoint, save_checkpoint

        model, _ = step1_model
        path = tmp_path / "m.npz"
        save_model(model, path)
        arrays, manifest = load_checkpoint(path)
        manifest["kind"] = "MysteryModel"
        # rebuild the archive with a corrupted manifest
        save_checkpoint(path, model.modules, manifest)
        with pytest.raises(ValueError, match="unknown model kind"):
            load_model(path)

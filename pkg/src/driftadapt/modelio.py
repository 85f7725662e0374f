"""Save and reload fitted estimators through the checkpoint archive.

The archive's manifest records the estimator class, its constructor
parameters, and enough structure (class count, graph feature width, strategy
tag) to rebuild the empty model before restoring weights bit-exactly.
"""

from __future__ import annotations

import numpy as np

from .adaptation import (
    AdvdaClassifier,
    DanClassifier,
    SupervisedClassifier,
    _ModalCore,
)
from .maxdirep import MaxDirepClassifier
from .nets import load_checkpoint, restore_modules, save_checkpoint

_KINDS = {
    cls.__name__: cls
    for cls in (MaxDirepClassifier, SupervisedClassifier, AdvdaClassifier, DanClassifier)
}


def save_model(est, path):
    kind = type(est).__name__
    if kind not in _KINDS:
        raise TypeError(f"don't know how to persist {kind}")
    manifest = {
        "kind": kind,
        "params": {k: _plain(v) for k, v in est.get_params().items()},
        "n_classes": int(est.n_classes_),
        "strategy": getattr(est, "strategy_", None),
        "feature_dim": (
            est.core_.feature_dim if hasattr(est, "core_") else None
        ),
    }
    save_checkpoint(path, est.modules, manifest)


def load_model(path):
    arrays, manifest = load_checkpoint(path)
    cls = _KINDS.get(manifest["kind"])
    if cls is None:
        raise ValueError(f"checkpoint holds unknown model kind {manifest['kind']!r}")
    est = cls(**manifest["params"])
    n_classes = manifest["n_classes"]
    est.n_classes_ = n_classes
    est.classes_ = np.arange(n_classes)
    est.history_ = []
    if cls is MaxDirepClassifier:
        est._init_nets(n_classes)
    else:
        kind = "advda" if cls is AdvdaClassifier else "plain"
        est.core_ = _ModalCore(
            est.modality, kind, n_classes, est.seed, manifest["feature_dim"]
        )
    if manifest.get("strategy"):
        est.strategy_ = manifest["strategy"]
    restore_modules(est.modules, arrays)
    return est


def _plain(v):
    """JSON-safe constructor parameter."""
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if v is None or isinstance(v, (bool, int, float, str, list)):
        return v
    return str(v)

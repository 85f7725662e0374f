"""Outlier scoring over reduced invariant features.

Five interchangeable detectors score how atypical each sample is within its
pseudo-class; scores are oriented so larger means more outlying.  Flagging is
quantile-based (the top ``round(fraction * N)`` scores, ties broken toward the
earlier sample) except Mahalanobis, which by default cuts at the chi-square
quantile matching ``fraction`` and can be switched to the shared quantile rule.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import chi2
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.ensemble import IsolationForest
from sklearn.mixture import GaussianMixture
from sklearn.neighbors import LocalOutlierFactor
from sklearn.svm import OneClassSVM

METHODS = ("lof", "gmm", "ocsvm", "mahalanobis", "iforest")


@dataclass
class OutlierConfig:
    method: str = "lof"
    fraction: float = 0.2
    pca_dims: int = 50
    lof_neighbors: int = 20
    gmm_components: int = 1
    ocsvm_nu: float | None = None      # defaults to fraction
    ocsvm_gamma: float | None = None   # defaults to the median heuristic
    iforest_trees: int = 100
    iforest_subsample: int = 256
    mahalanobis_by_fraction: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; pick one of {METHODS}")
        if not 0.0 < self.fraction < 1.0:
            raise ValueError("fraction must lie strictly between 0 and 1")
        if self.pca_dims < 1:
            raise ValueError("pca_dims must be positive")

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name for f in fields(cls)}
        bad = set(mapping) - known
        if bad:
            raise ValueError(f"unknown outlier keys: {sorted(bad)}")
        return cls(**mapping)


@dataclass
class OutlierVerdicts:
    scores: np.ndarray   # (N,) float64, larger = more outlying
    outlier: np.ndarray  # (N,) bool

    def __post_init__(self):
        if len(self.scores) != len(self.outlier):
            raise ValueError("scores and flags misaligned")

    def __len__(self):
        return len(self.scores)

    @property
    def inlier(self):
        return ~self.outlier


class PcaReducer(BaseEstimator, TransformerMixin):
    """Plain SVD principal-component projection with a pinned sign rule.

    Each component is flipped so its largest-magnitude coordinate is
    positive (first such coordinate on exact ties), making the projection a
    deterministic function of the data.
    """

    def __init__(self, n_components=50):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("expected a 2-d feature matrix")
        n, d = X.shape
        k = self.n_components
        if k > min(n, d):
            raise ValueError(
                f"n_components {k} exceeds min(n_samples, n_features) = {min(n, d)}"
            )
        self.mean_ = X.mean(axis=0)
        _, s, vt = np.linalg.svd(X - self.mean_, full_matrices=False)
        comps = vt[:k]
        for i in range(k):
            j = np.argmax(np.abs(comps[i]))
            if comps[i, j] < 0:
                comps[i] = -comps[i]
        self.components_ = comps
        self.explained_variance_ = s[:k] ** 2 / max(1, n - 1)
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_.T


def pca_reduce(X, dims=50):
    """Fit-and-project helper; returns (reduced, fitted reducer)."""
    red = PcaReducer(dims).fit(X)
    return red.transform(X), red


def _flag_top_fraction(scores, fraction):
    """Top round(fraction * N) scores; ties broken toward the earlier index."""
    n = len(scores)
    k = int(np.floor(fraction * n + 0.5))
    flags = np.zeros(n, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    flags[order[:k]] = True
    return flags


def _median_heuristic_gamma(X):
    n = len(X)
    sq = np.sum(X**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    upper = d2[np.triu_indices(n, k=1)]
    med = np.median(upper[upper > 0]) if np.any(upper > 0) else 1.0
    return 1.0 / max(med, 1e-12)


def _centered_cholesky(X, ddof):
    """Centered rows and the Cholesky factor of their covariance.

    The covariance is ridge-regularized with 1e-6 * trace/d on the diagonal
    when not positive definite (a warning is recorded).
    """
    n, d = X.shape
    centered = X - X.mean(axis=0)
    cov = (centered.T @ centered) / max(1, n - ddof)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        ridge = 1e-6 * np.trace(cov) / d
        warnings.warn(
            f"singular covariance; ridge-regularized with {ridge:.3e}",
            RuntimeWarning,
            stacklevel=3,
        )
        chol = np.linalg.cholesky(cov + ridge * np.eye(d))
    return centered, chol


def mahalanobis_scores(X):
    """Distance of each row to the sample mean under the sample covariance
    (ddof=1); see ``_centered_cholesky`` for the singular-covariance ridge."""
    X = np.asarray(X, dtype=np.float64)
    centered, chol = _centered_cholesky(X, ddof=1)
    w = solve_triangular(chol, centered.T, lower=True)
    return np.sqrt(np.sum(w**2, axis=0))


def _single_gaussian_nll(X):
    """Exact per-sample negative log-likelihood of the fitted Gaussian.

    The one-component mixture has a closed-form maximum-likelihood fit
    (sample mean, ddof=0 covariance); computing it directly keeps the score
    ranking exactly monotone in the Mahalanobis distances, which iterative
    fitting would only approximate.
    """
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[1]
    centered, chol = _centered_cholesky(X, ddof=0)
    w = solve_triangular(chol, centered.T, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    return 0.5 * (np.sum(w**2, axis=0) + log_det + d * np.log(2.0 * np.pi))


def detect_outliers(X, config):
    """Score and flag every row of ``X`` under one detector.

    Needs at least 5 samples and more samples than reduced dimensions for
    the covariance-based detectors to make sense.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a 2-d feature matrix")
    n, d = X.shape
    if n < 5:
        raise ValueError(f"need at least 5 samples to score outliers, got {n}")
    m = config.method
    if m == "lof":
        k = min(config.lof_neighbors, n - 1)
        lof = LocalOutlierFactor(n_neighbors=k)
        lof.fit(X)
        scores = -lof.negative_outlier_factor_
    elif m == "gmm":
        if n <= config.gmm_components:
            raise ValueError("more mixture components than samples")
        if config.gmm_components == 1:
            scores = _single_gaussian_nll(X)
        else:
            gm = GaussianMixture(
                n_components=config.gmm_components,
                covariance_type="full",
                random_state=config.seed,
                n_init=1,
            )
            gm.fit(X)
            scores = -gm.score_samples(X)  # negative log-likelihood
    elif m == "ocsvm":
        nu = config.ocsvm_nu if config.ocsvm_nu is not None else config.fraction
        gamma = (
            config.ocsvm_gamma
            if config.ocsvm_gamma is not None
            else _median_heuristic_gamma(X)
        )
        svm = OneClassSVM(kernel="rbf", nu=nu, gamma=gamma)
        svm.fit(X)
        scores = -svm.decision_function(X)
        flags = svm.predict(X) == -1  # the model's own boundary
        return OutlierVerdicts(scores=scores, outlier=flags)
    elif m == "mahalanobis":
        scores = mahalanobis_scores(X)
        if not config.mahalanobis_by_fraction:
            cut = chi2.ppf(1.0 - config.fraction, df=d)
            return OutlierVerdicts(scores=scores, outlier=scores**2 > cut)
    elif m == "iforest":
        forest = IsolationForest(
            n_estimators=config.iforest_trees,
            max_samples=min(config.iforest_subsample, n),
            random_state=config.seed,
        )
        forest.fit(X)
        scores = -forest.score_samples(X)
    else:  # pragma: no cover - guarded by OutlierConfig
        raise ValueError(f"unknown method {m!r}")
    return OutlierVerdicts(scores=scores, outlier=_flag_top_fraction(scores, config.fraction))


def verdicts_to_csv(verdicts, sample_keys, method, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_key", "method", "score", "flag"])
        for key, s, f in zip(sample_keys, verdicts.scores, verdicts.outlier):
            w.writerow([key, method, f"{s:.9g}", int(f)])

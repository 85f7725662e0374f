"""Independent oracles for the outlier detectors and the PCA reducer.

Mahalanobis and LOF get from-scratch reimplementations (direct solve /
naive O(N^2) neighbor scan); PCA is cross-checked against an eigendecomposition
of the covariance matrix.
"""

from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.distance import cdist
from scipy.stats import chi2

from driftadapt.outliers import (
    METHODS,
    OutlierConfig,
    OutlierVerdicts,
    PcaReducer,
    _flag_top_fraction,
    detect_outliers,
    mahalanobis_scores,
    pca_reduce,
    verdicts_to_csv,
)


def naive_lof(X, k):
    """Textbook local outlier factor with exactly k nearest neighbors."""
    n = len(X)
    dist = cdist(X, X)
    np.fill_diagonal(dist, np.inf)
    neighbors = np.argsort(dist, axis=1)[:, :k]
    k_distance = dist[np.arange(n), neighbors[:, -1]]
    lrd = np.empty(n)
    for p in range(n):
        reach = np.maximum(k_distance[neighbors[p]], dist[p, neighbors[p]])
        lrd[p] = 1.0 / reach.mean()
    lof = np.empty(n)
    for p in range(n):
        lof[p] = lrd[neighbors[p]].mean() / lrd[p]
    return lof


class TestMahalanobis:
    def test_matches_direct_solve(self, rng):
        X = rng.normal(size=(80, 5)) @ rng.normal(size=(5, 5)) + rng.normal(size=5)
        mu = X.mean(axis=0)
        cov = np.cov(X, rowvar=False, ddof=1)
        expected = np.array(
            [
                np.sqrt((x - mu) @ np.linalg.solve(cov, x - mu))
                for x in X
            ]
        )
        got = mahalanobis_scores(X)
        assert np.allclose(got, expected, atol=1e-6)

    def test_whitened_data_scores_are_centered_norms(self, rng):
        # If the sample covariance is the identity and the mean is zero, the
        # distance reduces to the euclidean norm.
        X = rng.normal(size=(200, 4))
        X = X - X.mean(axis=0)
        cov = np.cov(X, rowvar=False, ddof=1)
        L = np.linalg.cholesky(cov)
        W = X @ np.linalg.inv(L).T  # exactly whitened, zero mean
        got = mahalanobis_scores(W)
        assert np.allclose(got, np.linalg.norm(W, axis=1), atol=1e-6)

    def test_point_at_mean_scores_zero(self, rng):
        X = rng.normal(size=(30, 3))
        X = np.vstack([X, X.mean(axis=0)])
        # Appending the mean shifts it, so recompute against the new mean.
        mu = X.mean(axis=0)
        idx = int(np.argmin(np.linalg.norm(X - mu, axis=1)))
        scores = mahalanobis_scores(X)
        assert scores[idx] == scores.min()

    def test_singular_covariance_warns_and_still_scores(self, rng):
        base = rng.normal(size=(40, 3))
        X = np.hstack([base, base[:, :1]])  # exactly collinear column
        with pytest.warns(RuntimeWarning, match="singular covariance"):
            scores = mahalanobis_scores(X)
        assert np.all(np.isfinite(scores))

    def test_chi_square_cut_flags(self, rng):
        X = rng.normal(size=(300, 4))
        config = OutlierConfig(method="mahalanobis", fraction=0.2)
        verdicts = detect_outliers(X, config)
        cut = chi2.ppf(0.8, df=4)
        expected = verdicts.scores**2 > cut
        assert np.array_equal(verdicts.outlier, expected)

    def test_fraction_override_flags_fixed_count(self, rng):
        X = rng.normal(size=(100, 4))
        config = OutlierConfig(
            method="mahalanobis", fraction=0.2, mahalanobis_by_fraction=True
        )
        verdicts = detect_outliers(X, config)
        assert verdicts.outlier.sum() == 20


class TestLof:
    @pytest.mark.parametrize("n", [60, 150, 200])
    def test_matches_naive_oracle(self, rng, n):
        X = rng.normal(size=(n, 6))
        config = OutlierConfig(method="lof", lof_neighbors=20)
        got = detect_outliers(X, config).scores
        expected = naive_lof(X, 20)
        assert np.allclose(got, expected, atol=1e-6)

    def test_small_group_caps_neighbors(self, rng):
        X = rng.normal(size=(8, 3))
        got = detect_outliers(X, OutlierConfig(method="lof")).scores
        expected = naive_lof(X, 7)  # capped at n - 1
        assert np.allclose(got, expected, atol=1e-6)

    def test_planted_outlier_scores_highest(self, rng):
        X = rng.normal(size=(99, 4))
        X = np.vstack([X, np.full(4, 12.0)])
        verdicts = detect_outliers(X, OutlierConfig(method="lof"))
        assert np.argmax(verdicts.scores) == 99
        assert verdicts.outlier[99]


class TestQuantileFlagging:
    @pytest.mark.parametrize(
        "n,expected", [(100, 20), (97, 19), (103, 21), (5, 1), (12, 2), (13, 3)]
    )
    def test_count_is_round_half_up(self, rng, n, expected):
        scores = rng.normal(size=n)
        flags = _flag_top_fraction(scores, 0.2)
        assert flags.sum() == expected

    def test_flags_are_the_top_scores(self, rng):
        scores = rng.normal(size=50)
        flags = _flag_top_fraction(scores, 0.2)
        cut = np.sort(scores)[-10]
        assert np.array_equal(flags, scores >= cut)

    def test_ties_resolve_to_earlier_index(self):
        scores = np.array([1.0, 5.0, 5.0, 5.0, 0.0])
        flags = _flag_top_fraction(scores, 0.4)  # round(2.0) = 2 flags
        assert flags.tolist() == [False, True, True, False, False]

    def test_all_methods_with_quantile_rule_flag_same_count(self, rng):
        X = rng.normal(size=(100, 5))
        for method in ("lof", "gmm", "iforest"):
            verdicts = detect_outliers(X, OutlierConfig(method=method))
            assert verdicts.outlier.sum() == 20, method


class TestOtherDetectors:
    def test_gmm_single_component_ranks_like_mahalanobis(self, rng):
        # A one-component full-covariance mixture orders points by Mahalanobis
        # distance (its NLL is monotone in it), up to the tiny covariance
        # regularization the mixture adds.
        from scipy.stats import spearmanr

        X = rng.normal(size=(120, 5)) @ rng.normal(size=(5, 5))
        gmm = detect_outliers(X, OutlierConfig(method="gmm"))
        maha = mahalanobis_scores(X)
        rho = spearmanr(gmm.scores, maha).statistic
        assert rho > 0.999
        flags_by_maha = _flag_top_fraction(maha, 0.2)
        assert (gmm.outlier == flags_by_maha).mean() > 0.95

    def test_ocsvm_flags_follow_its_own_boundary(self, rng):
        X = rng.normal(size=(90, 4))
        verdicts = detect_outliers(X, OutlierConfig(method="ocsvm", seed=3))
        # Flagged fraction should be near nu = 0.2, not exactly quantile-cut.
        frac = verdicts.outlier.mean()
        assert 0.05 <= frac <= 0.4
        # Scores must orient larger = more outlying.
        assert verdicts.scores[verdicts.outlier].min() >= np.median(
            verdicts.scores[~verdicts.outlier]
        )

    def test_iforest_deterministic_under_seed(self, rng):
        X = rng.normal(size=(64, 4))
        a = detect_outliers(X, OutlierConfig(method="iforest", seed=5))
        b = detect_outliers(X, OutlierConfig(method="iforest", seed=5))
        assert np.array_equal(a.scores, b.scores)
        assert np.array_equal(a.outlier, b.outlier)

    def test_every_method_runs_and_aligns(self, rng):
        X = rng.normal(size=(40, 6))
        for method in METHODS:
            verdicts = detect_outliers(X, OutlierConfig(method=method))
            assert len(verdicts) == 40
            assert verdicts.scores.shape == (40,)
            assert verdicts.outlier.dtype == bool
            assert np.array_equal(verdicts.inlier, ~verdicts.outlier)


class TestValidation:
    def test_rejects_tiny_groups(self, rng):
        with pytest.raises(ValueError, match="at least 5"):
            detect_outliers(rng.normal(size=(4, 3)), OutlierConfig())

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            OutlierConfig(method="nope")
        with pytest.raises(ValueError):
            OutlierConfig(fraction=0.0)
        with pytest.raises(ValueError):
            OutlierConfig(fraction=1.0)
        with pytest.raises(ValueError):
            OutlierConfig(pca_dims=0)

    def test_from_mapping_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown outlier keys"):
            OutlierConfig.from_mapping({"method": "lof", "bogus": 1})

    def test_verdicts_alignment_enforced(self):
        with pytest.raises(ValueError):
            OutlierVerdicts(scores=np.zeros(3), outlier=np.zeros(2, dtype=bool))


class TestPca:
    def test_matches_eigendecomposition(self, rng):
        X = rng.normal(size=(60, 10)) @ rng.normal(size=(10, 10))
        red = PcaReducer(4).fit(X)
        cov = np.cov(X, rowvar=False, ddof=1)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        assert np.allclose(red.explained_variance_, evals[:4], atol=1e-8)
        for i in range(4):
            v = evecs[:, i]
            j = np.argmax(np.abs(v))
            if v[j] < 0:
                v = -v
            assert np.allclose(red.components_[i], v, atol=1e-8)

    def test_rank_k_data_reconstructs_exactly(self, rng):
        basis = np.linalg.qr(rng.normal(size=(10, 3)))[0].T
        X = rng.normal(size=(50, 3)) @ basis + rng.normal(size=10)
        coords, red = pca_reduce(X, dims=3)
        back = coords @ red.components_ + red.mean_
        assert np.allclose(back, X, atol=1e-8)

    def test_sign_rule_makes_fit_deterministic(self, rng):
        X = rng.normal(size=(40, 8))
        a = PcaReducer(5).fit(X)
        b = PcaReducer(5).fit(np.array(X))
        assert np.array_equal(a.components_, b.components_)
        for comp in a.components_:
            assert comp[np.argmax(np.abs(comp))] > 0

    def test_transform_centers_before_projecting(self, rng):
        X = rng.normal(size=(30, 6)) + 100.0
        coords, red = pca_reduce(X, dims=2)
        assert np.allclose(coords.mean(axis=0), 0.0, atol=1e-8)

    def test_rejects_too_many_components(self, rng):
        with pytest.raises(ValueError, match="exceeds"):
            PcaReducer(11).fit(rng.normal(size=(5, 11)))
        with pytest.raises(ValueError):
            PcaReducer(6).fit(rng.normal(size=(20, 5)))

    def test_projection_preserves_variance_ordering(self, rng):
        X = rng.normal(size=(100, 7)) * np.array([5, 3, 2, 1, 0.5, 0.2, 0.1])
        red = PcaReducer(7).fit(X)
        assert np.all(np.diff(red.explained_variance_) <= 1e-9)
        coords = red.transform(X)
        col_var = coords.var(axis=0, ddof=1)
        assert np.allclose(col_var, red.explained_variance_, atol=1e-8)


class TestCsvExport:
    def test_round_trip_columns(self, tmp_path, rng):
        X = rng.normal(size=(10, 3))
        verdicts = detect_outliers(X, OutlierConfig(method="lof"))
        keys = [f"s{i}" for i in range(10)]
        path = tmp_path / "verdicts.csv"
        verdicts_to_csv(verdicts, keys, "lof", path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "sample_key,method,score,flag"
        assert len(lines) == 11
        first = lines[1].split(",")
        assert first[0] == "s0"
        assert first[1] == "lof"
        assert first[3] in {"0", "1"}

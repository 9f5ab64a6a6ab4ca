import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import nnls

from csgrid.baselines import (PIPELINES, grid_average_mw, kmeans, nnls_active_set, run_pipeline, sparse_code)
from csgrid.datagen import SyntheticConfig, SyntheticDataset, gen_dataset
from csgrid.errors import CapabilityError, ConfigError, ShapeError
from csgrid.lscm import dbm_to_mw, mw_to_dbm
from csgrid.metrics import adjusted_rand_index, ContingencyTable, sample_mean_nmse

# support-recovery rate of an independent NOMP built on scipy's NNLS, measured once
# over 2000 noiseless trials (M=32, N=128, L=3, nonzeros uniform on [0.5, 1.5], seed 0)
NOMP_ORACLE_RATE = 0.9735


def gaussian_trial(rng, M=32, N=128, L=3):
    A = rng.standard_normal((M, N))
    support = rng.choice(N, L, replace=False)
    x = np.zeros(N)
    x[support] = rng.uniform(0.5, 1.5, L)
    return A, x, set(support.tolist())


def nomp_recovery_rate(seed, trials):
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(trials):
        A, x, support = gaussian_trial(rng)
        hits += set(sparse_code(A, A @ x, 3, "nomp").support) == support
    return hits / trials


def subset_residual(A, y, S, nonneg):
    sub = A[:, list(S)]
    if nonneg:
        return nnls(sub, y)[1]
    coef = np.linalg.lstsq(sub, y, rcond=None)[0]
    return np.linalg.norm(y - sub @ coef)


def best_subset_residual(A, y, L, nonneg):
    """Exhaustive optimum over supports of size <= L: ``(residual, support)``."""
    best, best_S = np.linalg.norm(y), ()
    for size in range(1, L + 1):
        for S in itertools.combinations(range(A.shape[1]), size):
            r = subset_residual(A, y, S, nonneg)
            if r < best:
                best, best_S = r, S
    return best, set(best_S)


class TestKMeans:
    def test_separable_pair(self):
        km = kmeans(np.array([0.0, 10.0]), 2)
        assert sorted(km.centers[:, 0]) == [0.0, 10.0]
        assert km.inertia == 0.0

    def test_distinct_points_zero_inertia(self, rng):
        X = rng.random((5, 3))
        assert kmeans(X, 5).inertia == pytest.approx(0.0, abs=1e-24)

    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_inertia_non_increasing(self, seed, K):
        X = np.random.default_rng(seed).random((40, 3))
        hist = kmeans(X, K, seed).inertia_history
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))

    def test_no_empty_clusters_with_duplicates(self):
        X = np.array([[0.0], [0.0], [0.0], [5.0]])
        km = kmeans(X, 3, seed=0)
        assert km.centers.shape == (3, 1)

    def test_restarts_never_worse(self, rng):
        X = rng.random((60, 2))
        assert kmeans(X, 5, 3, n_init=5).inertia <= kmeans(X, 5, 3, n_init=1).inertia + 1e-12

    def test_invalid(self):
        with pytest.raises(ConfigError):
            kmeans(np.ones((3, 2)), 0)


class TestSparseCoding:
    def test_identity_one_sparse(self):
        code = sparse_code(np.eye(3), np.array([0.0, 2.0, 0.0]), 1, "omp")
        np.testing.assert_allclose(code.x, [0, 2, 0])
        assert code.residual_norm == pytest.approx(0.0)

    @pytest.mark.parametrize("variant", ["omp", "nomp", "wnomp"])
    def test_orthogonal_exact_recovery(self, variant):
        rng = np.random.default_rng(5)
        ok = 0
        for _ in range(100):
            Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
            A = Q[:, :6] * rng.uniform(0.5, 2.0, 6)
            x = np.zeros(6)
            x[rng.choice(6, 2, replace=False)] = rng.uniform(0.5, 1.5, 2)
            code = sparse_code(A, A @ x, 2, variant)
            ok += np.allclose(code.x, x, atol=1e-10)
        assert ok == 100

    @pytest.mark.parametrize("variant,nonneg", [("omp", False), ("nomp", True)])
    def test_against_exhaustive_optimum(self, variant, nonneg):
        rng = np.random.default_rng(11)
        for _ in range(40):
            M, N, L = rng.integers(3, 9), rng.integers(4, 13), rng.integers(1, 3)
            A = rng.random((M, N)) if nonneg else rng.standard_normal((M, N))
            y = A @ (np.abs(rng.standard_normal(N)) * (rng.random(N) < 0.3)) + rng.random(M) * 0.1
            code = sparse_code(A, y, L, variant)
            opt, opt_support = best_subset_residual(A, y, L, nonneg)
            assert code.residual_norm >= opt - 1e-9
            if set(code.support) == opt_support:
                assert code.residual_norm <= opt + 1e-9

    def test_nonnegativity_and_sparsity(self, rng):
        for _ in range(20):
            A = rng.random((6, 10))
            code = sparse_code(A, rng.random(6), 3, "nomp")
            assert np.all(code.x >= 0)
            assert np.count_nonzero(code.x) <= 3

    def test_zero_observation(self):
        code = sparse_code(np.eye(3), np.zeros(3), 2)
        assert code.support == [] and np.all(code.x == 0)

    def test_recovery_rate_matches_oracle(self):
        rate = nomp_recovery_rate(1, 200)
        assert rate >= 0.9
        assert abs(rate - NOMP_ORACLE_RATE) <= 0.05

    def test_bad_variant_and_shape(self):
        with pytest.raises(ConfigError):
            sparse_code(np.eye(2), np.ones(2), 1, "lasso")
        with pytest.raises(ShapeError):
            sparse_code(np.eye(2), np.ones(3), 1)

    def test_nnls_matches_scipy(self, rng):
        for _ in range(20):
            A = rng.standard_normal((8, 5))
            b = rng.standard_normal(8)
            np.testing.assert_allclose(nnls_active_set(A, b), nnls(A, b)[0], atol=1e-9)


class TestPipelines:
    @pytest.fixture
    def data(self, rng):
        A = rng.random((8, 12))
        return gen_dataset(SyntheticConfig(K=3, N=12, L=2, samples_per_grid=15, s=0.3), A), A

    def test_every_pipeline_runs(self, data):
        ds, A = data
        for name in PIPELINES:
            res = run_pipeline(name, ds, A, 3, 2, seed=0, n_init=2)
            assert res.labels.shape == (ds.I,)
            if name == "kmeans_y":
                assert res.centers is None and res.diagnostics["metrics_limited"]
            else:
                assert res.centers.shape == (3, 12)

    def test_kmeans_x_exact_on_noiseless(self, rng):
        ds = gen_dataset(SyntheticConfig(K=4, N=12, L=2, samples_per_grid=10, s=0.0), rng.random((8, 12)))
        res = run_pipeline("kmeans_x", ds, rng.random((8, 12)), 4, 2)
        assert adjusted_rand_index(ContingencyTable.from_labels(ds.labels, res.labels)) == 1.0

    def test_nomp_centers_sparse_nonnegative(self, data):
        ds, A = data
        res = run_pipeline("kmeans_y_nomp", ds, A, 3, 2)
        assert np.all(res.centers >= 0)
        assert np.all((res.centers > 0).sum(axis=1) <= 2)

    def test_nomp_kmeans_x_exact_with_orthogonal_columns(self):
        rng = np.random.default_rng(2)
        Q, _ = np.linalg.qr(rng.standard_normal((12, 12)))
        # nonnegative orthogonal columns: disjoint supports
        A = np.zeros((12, 6))
        for n in range(6):
            A[2 * n:2 * n + 2, n] = rng.uniform(0.5, 1.5, 2)
        ds = gen_dataset(SyntheticConfig(K=3, N=6, L=2, samples_per_grid=8, s=0.0, seed=4), A)
        res = run_pipeline("nomp_kmeans_x", ds, A, 3, 2)
        assert sample_mean_nmse(ds.centers, ds.labels, res.centers, res.labels) == pytest.approx(0.0, abs=1e-9)

    def test_capability_errors(self, data):
        ds, A = data
        obs = SyntheticDataset(None, None, ds.rsrp_dbm, None, None, 2, 0.3, 1e-5)
        with pytest.raises(CapabilityError):
            run_pipeline("kmeans_x", obs, A, 3, 2)
        with pytest.raises(CapabilityError):
            run_pipeline("gsg_nomp", obs, A, 3, 2)
        with pytest.raises(ConfigError):
            run_pipeline("kmeans_z", ds, A, 3, 2)

    def test_grid_average_in_mw(self):
        y = np.array([[0.0], [10.0]])
        means, counts = grid_average_mw(dbm_to_mw(y), np.array([0, 0]), 2)
        assert mw_to_dbm(means[0])[0] == pytest.approx(10 * np.log10(5.5))
        assert counts.tolist() == [2, 0] and np.all(means[1] == 0)

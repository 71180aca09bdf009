import numpy as np
import pytest
import scipy.sparse as sp

from socdesk.pca import PcaModel, fit_pca, load_pca, save_pca, transform, transform_matrix, validate_model


def oracle_pca(X, k):
    """Independent reference: explicit covariance, np.linalg.eig, manual sort.

    Returns (ratios, components) with the same sign convention: the largest
    magnitude entry of each component is non-negative.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    mean = X.sum(axis=0) / n
    cov = np.zeros((d, d))
    for row in X:
        delta = row - mean
        cov += np.outer(delta, delta)
    cov /= n - 1
    values, vectors = np.linalg.eig(cov)
    values = values.real
    vectors = vectors.real
    order = np.argsort(-values)
    values = values[order][:k]
    components = vectors[:, order][:, :k].T.copy()
    for row in components:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    ratios = values / np.trace(cov)
    return ratios, components, mean


class TestFit:
    def test_rank_one_line(self):
        t = np.linspace(-3, 3, 50)
        X = np.stack([t, t], axis=1)
        model = fit_pca(X, k=2, variance_target=0.95)
        assert model.k == 1
        np.testing.assert_allclose(np.abs(model.components[0]), [1 / np.sqrt(2)] * 2, atol=1e-12)
        np.testing.assert_allclose(model.explained_variance_ratio, [1.0], atol=1e-12)

    def test_matches_oracle_on_random_matrix(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(200, 30)) @ np.diag(rng.uniform(0.5, 3.0, size=30))
        model = fit_pca(X, k=30, variance_target=1.0)
        ratios, components, mean = oracle_pca(X, model.k)
        np.testing.assert_allclose(model.explained_variance_ratio, ratios, atol=1e-6)
        np.testing.assert_allclose(model.components, components, atol=1e-6)
        row = X[17]
        np.testing.assert_allclose(transform(model, row), components @ (row - mean), atol=1e-6)

    def test_variance_target_binds_first(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=(300, 6))
        X = base * np.array([10.0, 1.0, 0.5, 0.3, 0.2, 0.1])
        loose = fit_pca(X, k=6, variance_target=0.5)
        assert loose.k < 6
        assert loose.captured_variance() >= 0.5

    def test_component_cap_binds_first(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(100, 20))
        model = fit_pca(X, k=3, variance_target=0.99)
        assert model.k == 3

    def test_errors(self):
        with pytest.raises(ValueError):
            fit_pca(np.zeros((1, 4)))
        with pytest.raises(ValueError):
            fit_pca(np.ones((10, 4)))  # zero variance everywhere

    def test_determinism(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(80, 12))
        a = fit_pca(X, k=5)
        b = fit_pca(X, k=5)
        assert a.components.tobytes() == b.components.tobytes()
        assert a.explained_variance_ratio.tobytes() == b.explained_variance_ratio.tobytes()

    def test_sign_convention(self):
        rng = np.random.default_rng(4)
        model = fit_pca(rng.normal(size=(60, 9)), k=9, variance_target=1.0)
        for row in model.components:
            assert row[int(np.argmax(np.abs(row)))] >= 0

    def test_sparse_matches_dense(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(120, 15))
        X[X < 0.5] = 0.0
        dense = fit_pca(X, k=8)
        sparse = fit_pca(sp.csr_matrix(X), k=8)
        np.testing.assert_allclose(sparse.components, dense.components, atol=1e-9)
        np.testing.assert_allclose(sparse.mean, dense.mean, atol=1e-12)

    def test_wide_input_svd_path(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(40, 2100))
        model = fit_pca(X, k=5, variance_target=1.0)
        validate_model(model)
        assert model.k == 5
        ratios, _, _ = oracle_pca(X, 5)
        np.testing.assert_allclose(model.explained_variance_ratio, ratios[:5], atol=1e-6)


class TestInvariants:
    def test_orthonormality(self):
        rng = np.random.default_rng(7)
        model = fit_pca(rng.normal(size=(150, 25)), k=25, variance_target=1.0)
        gram = model.components @ model.components.T
        assert np.max(np.abs(gram - np.eye(model.k))) < 1e-6

    def test_variance_accounting(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(200, 10)) * np.linspace(3, 0.5, 10)
        model = fit_pca(X, k=10, variance_target=1.0)
        Z = transform_matrix(model, X)
        observed = Z.var(axis=0, ddof=1)
        total = np.trace(np.cov(X, rowvar=False))
        np.testing.assert_allclose(observed / total, model.explained_variance_ratio, rtol=1e-6)

    def test_validate_model_rejects_bad(self):
        model = PcaModel(
            mean=np.zeros(2),
            components=np.array([[1.0, 1.0]]),  # not unit norm
            explained_variance_ratio=np.array([1.0]),
        )
        with pytest.raises(ValueError):
            validate_model(model)


class TestTransform:
    def test_mean_maps_to_zero(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(50, 8))
        model = fit_pca(X, k=4)
        np.testing.assert_allclose(transform(model, model.mean), np.zeros(model.k), atol=1e-12)

    def test_dimension_mismatch_names_both(self):
        model = fit_pca(np.random.default_rng(10).normal(size=(30, 6)), k=3)
        with pytest.raises(ValueError, match="4.*6|6.*4"):
            transform(model, np.zeros(4))

    def test_reconstruction_error_matches_discarded_variance(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(120, 10)) * np.linspace(4, 0.2, 10)
        model = fit_pca(X, k=4, variance_target=2.0)  # force the cap
        Z = transform_matrix(model, X)
        reconstructed = Z @ model.components + model.mean
        residual = float(((X - reconstructed) ** 2).sum())
        total = float(np.trace(np.cov(X, rowvar=False))) * (len(X) - 1)
        discarded = total * (1.0 - model.captured_variance())
        np.testing.assert_allclose(residual, discarded, rtol=1e-6)

    def test_matrix_and_vector_agree(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(25, 7))
        model = fit_pca(X, k=3)
        Z = transform_matrix(model, X)
        for i in (0, 10, 24):
            np.testing.assert_allclose(Z[i], transform(model, X[i]), atol=1e-12)

    def test_sparse_transform(self):
        rng = np.random.default_rng(13)
        X = rng.normal(size=(40, 9))
        model = fit_pca(X, k=4)
        np.testing.assert_allclose(transform_matrix(model, sp.csr_matrix(X)), transform_matrix(model, X), atol=1e-12)


class TestBundle:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(14)
        model = fit_pca(rng.normal(size=(70, 11)), k=6)
        path = tmp_path / "pca.bin"
        save_pca(model, path)
        loaded = load_pca(path)
        assert loaded.version == model.version
        assert loaded.mean.tobytes() == model.mean.tobytes()
        assert loaded.components.tobytes() == model.components.tobytes()
        assert loaded.explained_variance_ratio.tobytes() == model.explained_variance_ratio.tobytes()

    def test_save_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(15)
        X = rng.normal(size=(50, 5))
        save_pca(fit_pca(X, k=3), tmp_path / "a.bin")
        save_pca(fit_pca(X, k=3), tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

"""Tests for the fuzzy-graph SGD reducer."""

from __future__ import annotations

import numpy as np
import pytest

from etchpit.embedding import EmbeddingConfig, reduce_pca, reduce_tsne, reduce_umap
from etchpit.embedding.umap import (
    edge_cross_entropy,
    edge_cross_entropy_grad,
    exact_knn,
    fit_curve_params,
    fuzzy_graph,
    smooth_knn_calibration,
)

from test_embedding import three_clusters


class TestGraphConstruction:
    def test_knn_excludes_self_and_sorts(self):
        X, _ = three_clusters(n_per=20, dim=5)
        idx, dists = exact_knn(X, 8)
        rows = np.arange(len(X))
        assert not np.any(idx == rows[:, None])
        assert np.all(np.diff(dists, axis=1) >= 0)

    def test_calibration_residual(self):
        X, _ = three_clusters(n_per=50)
        _, dists = exact_knn(X, 10)
        sigmas, rhos = smooth_knn_calibration(dists)
        totals = np.exp(-np.maximum(dists - rhos[:, None], 0.0) / sigmas[:, None]).sum(axis=1)
        assert np.abs(totals - np.log2(10)).max() <= 1e-5

    def test_graph_weights_and_symmetry(self):
        X, _ = three_clusters(n_per=40, dim=8)
        W = fuzzy_graph(X, 10)
        assert W.data.min() > 0.0 and W.data.max() <= 1.0 + 1e-12
        asym = (W - W.T).tocoo()
        assert np.abs(asym.data).max() if asym.data.size else 0.0 <= 1e-12

    def test_nearest_neighbor_membership_one(self):
        X, _ = three_clusters(n_per=30, dim=6, seed=4)
        idx, dists = exact_knn(X, 10)
        sigmas, rhos = smooth_knn_calibration(dists)
        w_first = np.exp(-np.maximum(dists[:, 0] - rhos, 0.0) / sigmas)
        np.testing.assert_allclose(w_first, 1.0)

    def test_duplicate_heavy_data_stays_finite(self):
        rng = np.random.default_rng(5)
        X = np.repeat(rng.normal(size=(4, 6)), 8, axis=0)  # 32 points, 4 distinct
        W = fuzzy_graph(X, 5)
        assert np.isfinite(W.data).all()
        cfg = EmbeddingConfig(n_neighbors=5, seed=1, n_epochs=30)
        emb = reduce_umap(X, cfg)
        assert np.isfinite(emb.coords).all()


class TestGradient:
    def test_matches_finite_differences_at_random_edges(self):
        rng = np.random.default_rng(6)
        a, b = fit_curve_params(0.3)
        for _ in range(10):
            head = rng.normal(size=3)
            other = rng.normal(size=3)
            negs = rng.normal(size=(5, 3))
            grad = edge_cross_entropy_grad(head, other, negs, a, b)
            eps = 1e-6
            fd = np.empty(3)
            for d in range(3):
                hp, hm = head.copy(), head.copy()
                hp[d] += eps
                hm[d] -= eps
                fd[d] = (
                    edge_cross_entropy(hp, other, negs, a, b)
                    - edge_cross_entropy(hm, other, negs, a, b)
                ) / (2 * eps)
            assert np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-12) <= 1e-4

    def test_curve_fit_matches_reference_shape(self):
        a, b = fit_curve_params(0.3)
        # the fitted kernel must track the offset exponential it targets
        xs = np.linspace(0.05, 3.0, 50)
        target = np.where(xs < 0.3, 1.0, np.exp(-(xs - 0.3)))
        fitted = 1.0 / (1.0 + a * xs ** (2 * b))
        assert np.abs(fitted - target).max() < 0.08


class TestReduceUmap:
    def test_three_cluster_silhouette(self):
        from sklearn.metrics import silhouette_score

        X, labels = three_clusters()
        cfg = EmbeddingConfig(n_neighbors=10, min_dist=0.3, seed=32, n_components=3)
        emb = reduce_umap(X, cfg)
        assert silhouette_score(emb.coords, labels) >= 0.8

    def test_deterministic_bit_identical(self):
        X, _ = three_clusters(n_per=40)
        cfg = EmbeddingConfig(seed=32, n_epochs=50)
        a = reduce_umap(X, cfg)
        b = reduce_umap(X, cfg)
        np.testing.assert_array_equal(a.coords, b.coords)

    def test_tiny_set_full_neighborhood(self):
        from sklearn.cluster import KMeans
        from sklearn.metrics import adjusted_rand_score

        rng = np.random.default_rng(7)
        X = np.vstack(
            [rng.normal(0.0, 0.3, size=(6, 4)), rng.normal(8.0, 0.3, size=(6, 4))]
        )
        labels = np.repeat([0, 1], 6)
        cfg = EmbeddingConfig(n_neighbors=11, seed=32, n_epochs=100)
        emb = reduce_umap(X, cfg)
        pred = KMeans(n_clusters=2, n_init=10, random_state=0).fit_predict(emb.coords)
        assert adjusted_rand_score(labels, pred) == 1.0

    def test_rejects_too_small_dataset(self):
        X = np.zeros((5, 3))
        with pytest.raises(ValueError, match="n_neighbors"):
            reduce_umap(X, EmbeddingConfig(n_neighbors=10))

    def test_all_reducers_keep_clusters_tight(self):
        X, labels = three_clusters(n_per=50)
        cfg = EmbeddingConfig(n_neighbors=10, seed=32, n_epochs=100)
        for emb in (
            reduce_umap(X, cfg),
            reduce_pca(X, k=3),
            reduce_tsne(X, perplexity=15, seed=32),
        ):
            coords = emb.coords
            intra, inter = [], []
            for i in range(3):
                pts = coords[labels == i]
                others = coords[labels != i]
                intra.append(
                    np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2).mean()
                )
                inter.append(
                    np.linalg.norm(pts[:, None, :] - others[None, :, :], axis=2).mean()
                )
            assert np.mean(intra) < np.mean(inter)


class TestTransform:
    def test_new_points_land_near_their_cluster(self):
        X, labels = three_clusters(n_per=60)
        cfg = EmbeddingConfig(n_neighbors=10, seed=32, n_epochs=100)
        emb, model = reduce_umap(X, cfg, return_model=True)

        rng = np.random.default_rng(9)
        # fresh samples from cluster 0's neighborhood
        probe = X[labels == 0][:5] + rng.normal(scale=0.05, size=(5, X.shape[1]))
        mapped = model.transform(probe)
        centroids = np.stack([emb.coords[labels == i].mean(axis=0) for i in range(3)])
        nearest = np.argmin(
            np.linalg.norm(mapped[:, None, :] - centroids[None, :, :], axis=2), axis=1
        )
        assert np.all(nearest == 0)

    def test_model_roundtrip(self, tmp_path):
        from etchpit.embedding import UmapModel

        X, _ = three_clusters(n_per=20, dim=6)
        cfg = EmbeddingConfig(n_neighbors=8, seed=1, n_epochs=30)
        _, model = reduce_umap(X, cfg, return_model=True)
        path = tmp_path / "reducer.npz"
        model.save(path)
        loaded = UmapModel.load(path)
        probe = X[:3] + 0.01
        np.testing.assert_array_equal(model.transform(probe), loaded.transform(probe))

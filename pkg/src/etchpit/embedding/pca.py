"""Principal component analysis via eigendecomposition of the covariance."""

from __future__ import annotations

import warnings

import numpy as np

from .common import Embedding

__all__ = ["reduce_pca"]


def reduce_pca(X: np.ndarray, k: int = 3, ids: list[str] | None = None) -> Embedding:
    """Project mean-centered data onto the top-k principal directions.

    Components are ordered by decreasing variance with the sign fixed so
    each component's largest-magnitude loading is positive. Zero-variance
    data yields an all-zero embedding with a warning. ``info`` carries
    the components, the mean, and explained-variance ratios.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    ids = [str(i) for i in range(n)] if ids is None else list(ids)

    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    components = evecs[:, order].T  # (k, d)
    variances = np.maximum(evals[order], 0.0)

    if variances.max(initial=0.0) <= 0.0:
        warnings.warn("zero-variance data: PCA embedding is all zeros")
        coords = np.zeros((n, k))
    else:
        for i in range(k):
            j = np.argmax(np.abs(components[i]))
            if components[i, j] < 0:
                components[i] = -components[i]
        coords = centered @ components.T

    total = cov.trace()
    ratios = variances / total if total > 0 else np.zeros(k)
    return Embedding(
        coords=coords,
        ids=ids,
        config={"method": "pca", "n_components": k},
        info={
            "components": components,
            "mean": mean,
            "explained_variance": variances,
            "explained_variance_ratio": ratios,
        },
    )

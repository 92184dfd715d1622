"""Fuzzy k-NN graph embedding optimized by negative-sampling SGD.

Pipeline: exact Euclidean k-NN, per-point smooth-kNN calibration (binary
search for the kernel width that makes the fuzzy neighborhood cardinality
log2(k)), fuzzy-union symmetrization, spectral initialization from the
graph Laplacian, then stochastic gradient descent on the fuzzy
cross-entropy with 5 negative samples per edge. Deterministic for a
fixed seed; single-threaded layout.
"""

from __future__ import annotations

import numba
import numpy as np
import scipy.sparse as sp
from scipy.optimize import curve_fit

from .common import Embedding, EmbeddingConfig

__all__ = [
    "reduce_umap",
    "UmapModel",
    "exact_knn",
    "smooth_knn_calibration",
    "fuzzy_graph",
    "fit_curve_params",
    "spectral_init",
    "edge_cross_entropy",
    "edge_cross_entropy_grad",
]

SMOOTH_K_TOLERANCE = 1e-5
MIN_K_DIST_SCALE = 1e-3
_REPULSION_STRENGTH = 1.0
_AB_CACHE: dict[tuple[float, float], tuple[float, float]] = {}


def exact_knn(X: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest neighbors (Euclidean, self excluded), O(N^2).

    Returns (indices, distances), each (N, k), sorted by distance.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= n_neighbors < N, got k={k}, N={n}")
    sq = np.einsum("ij,ij->i", X, X)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, np.inf)
    idx = np.argpartition(d2, k - 1, axis=1)[:, :k]
    rows = np.arange(n)[:, None]
    order = np.argsort(d2[rows, idx], axis=1, kind="stable")
    idx = idx[rows, order]
    return idx, np.sqrt(d2[rows, idx])


def smooth_knn_calibration(
    dists: np.ndarray, n_iter: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point (sigma, rho) so that sum_j exp(-max(0, d_ij - rho_i) /
    sigma_i) = log2(k) to within SMOOTH_K_TOLERANCE.

    rho_i is the nearest nonzero neighbor distance (zero when every
    neighbor coincides with the point, which keeps duplicate-heavy data
    finite). The binary search doubles upward until bracketed.
    """
    n, k = dists.shape
    target = np.log2(k)
    sigmas = np.empty(n)
    rhos = np.empty(n)
    mean_all = float(dists.mean())

    for i in range(n):
        row = dists[i]
        nonzero = row[row > 0.0]
        rhos[i] = nonzero[0] if nonzero.size else 0.0

        lo, hi, mid = 0.0, np.inf, 1.0
        for _ in range(n_iter):
            shifted = row - rhos[i]
            psum = float(np.exp(-np.maximum(shifted, 0.0) / mid).sum())
            if abs(psum - target) < SMOOTH_K_TOLERANCE:
                break
            if psum > target:
                hi = mid
                mid = (lo + hi) / 2.0
            else:
                lo = mid
                mid = mid * 2.0 if hi == np.inf else (lo + hi) / 2.0
        sigmas[i] = mid

        # keep the kernel from collapsing on near-duplicate rows
        mean_row = float(row.mean())
        floor = MIN_K_DIST_SCALE * (mean_row if rhos[i] > 0.0 else mean_all)
        if sigmas[i] < floor:
            sigmas[i] = floor
    return sigmas, rhos


def fuzzy_graph(X: np.ndarray, n_neighbors: int) -> sp.csr_matrix:
    """Symmetrized fuzzy k-NN graph: w = exp(-max(0, d - rho)/sigma),
    combined by fuzzy union a + b - ab. Weights lie in (0, 1]."""
    idx, dists = exact_knn(X, n_neighbors)
    sigmas, rhos = smooth_knn_calibration(dists)
    n, k = idx.shape
    vals = np.exp(-np.maximum(dists - rhos[:, None], 0.0) / sigmas[:, None])
    rows = np.repeat(np.arange(n), k)
    W = sp.coo_matrix((vals.ravel(), (rows, idx.ravel())), shape=(n, n)).tocsr()
    Wt = W.T.tocsr()
    sym = W + Wt - W.multiply(Wt)
    sym.eliminate_zeros()
    return sym.tocsr()


def fit_curve_params(min_dist: float, spread: float = 1.0) -> tuple[float, float]:
    """(a, b) of the low-dimensional kernel 1/(1 + a d^(2b)), least-squares
    fitted to the reference curve exp(-(d - min_dist)/spread) for
    d > min_dist and 1 otherwise. Cached per (min_dist, spread)."""
    key = (round(min_dist, 12), round(spread, 12))
    if key not in _AB_CACHE:
        xs = np.linspace(0.0, spread * 3.0, 300)
        ys = np.ones_like(xs)
        tail = xs >= min_dist
        ys[tail] = np.exp(-(xs[tail] - min_dist) / spread)
        (a, b), _ = curve_fit(lambda x, a, b: 1.0 / (1.0 + a * x ** (2.0 * b)), xs, ys)
        _AB_CACHE[key] = (float(a), float(b))
    return _AB_CACHE[key]


def spectral_init(
    graph: sp.csr_matrix, n_components: int, rng: np.random.Generator
) -> np.ndarray:
    """Eigenvectors 1..n_components of the symmetric normalized Laplacian,
    scaled to max-abs 10 with a small seeded jitter (coincident rows would
    otherwise zero out the repulsion gradients)."""
    n = graph.shape[0]
    deg = np.asarray(graph.sum(axis=1)).ravel()
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-12)), 0.0)
    if n <= 2000:
        lap = np.eye(n) - (graph.toarray() * inv_sqrt[:, None]) * inv_sqrt[None, :]
        _, evecs = np.linalg.eigh(lap)
        init = evecs[:, 1 : n_components + 1]
    else:
        from scipy.sparse.linalg import eigsh

        lap = sp.identity(n) - sp.diags(inv_sqrt) @ graph @ sp.diags(inv_sqrt)
        _, evecs = eigsh(lap.tocsc(), k=n_components + 1, sigma=0.0, v0=np.ones(n) / np.sqrt(n))
        init = evecs[:, 1 : n_components + 1]
    top = np.abs(init).max()
    if top > 0:
        init = init * (10.0 / top)
    return init + rng.normal(scale=1e-4, size=init.shape)


def edge_cross_entropy(
    head: np.ndarray, other: np.ndarray, negatives: np.ndarray, a: float, b: float
) -> float:
    """Sampled cross-entropy of one positive edge and its negatives:
    -log phi(||head-other||) - sum_k log(1 - phi(||head-neg_k||)) with
    phi(d) = 1/(1 + a d^(2b)). Exact counterpart of
    ``edge_cross_entropy_grad`` for finite-difference checks."""
    d2 = float(((head - other) ** 2).sum())
    loss = float(np.log1p(a * d2**b))
    for neg in negatives:
        d2n = float(((head - neg) ** 2).sum())
        loss += float(np.log1p(a * d2n**b) - np.log(a) - b * np.log(d2n))
    return loss


def edge_cross_entropy_grad(
    head: np.ndarray, other: np.ndarray, negatives: np.ndarray, a: float, b: float
) -> np.ndarray:
    """Analytic gradient of ``edge_cross_entropy`` with respect to
    ``head`` (no clipping, no epsilon: the SGD kernel applies those for
    robustness, the mathematics is checked here)."""
    d2 = float(((head - other) ** 2).sum())
    grad = (2.0 * a * b * d2 ** (b - 1.0) / (1.0 + a * d2**b)) * (head - other)
    for neg in negatives:
        diff = head - neg
        d2n = float((diff**2).sum())
        grad += (-2.0 * b / (d2n * (1.0 + a * d2n**b))) * diff
    return grad


@numba.njit(inline="always")
def _clip(val, bound):
    if val > bound:
        return bound
    if val < -bound:
        return -bound
    return val


@numba.njit(inline="always")
def _xorshift(state):
    # xorshift64*: deterministic stream independent of numpy's RNG
    s = state[0]
    s ^= s >> np.uint64(12)
    s ^= (s << np.uint64(25)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    s ^= s >> np.uint64(27)
    state[0] = s
    return (s * np.uint64(2685821657736338717)) & np.uint64(0xFFFFFFFFFFFFFFFF)


@numba.njit
def _optimize_layout(
    emb,
    heads,
    tails,
    epochs_per_sample,
    a,
    b,
    n_epochs,
    initial_alpha,
    negative_sample_rate,
    rng_state,
):
    n_vertices = emb.shape[0]
    dim = emb.shape[1]
    n_edges = heads.shape[0]
    epochs_per_negative_sample = epochs_per_sample / negative_sample_rate
    epoch_of_next_sample = epochs_per_sample.copy()
    epoch_of_next_negative_sample = epochs_per_negative_sample.copy()

    for epoch in range(n_epochs):
        alpha = initial_alpha * (1.0 - epoch / n_epochs)
        for e in range(n_edges):
            if epoch_of_next_sample[e] > epoch:
                continue
            j = heads[e]
            k = tails[e]

            d2 = 0.0
            for d in range(dim):
                diff = emb[j, d] - emb[k, d]
                d2 += diff * diff
            if d2 > 0.0:
                coeff = (-2.0 * a * b * d2 ** (b - 1.0)) / (1.0 + a * d2**b)
            else:
                coeff = 0.0
            for d in range(dim):
                g = _clip(coeff * (emb[j, d] - emb[k, d]), 4.0)
                emb[j, d] += alpha * g
                emb[k, d] -= alpha * g
            epoch_of_next_sample[e] += epochs_per_sample[e]

            n_neg = int(
                (epoch - epoch_of_next_negative_sample[e]) / epochs_per_negative_sample[e]
            )
            for _ in range(n_neg):
                other = int(_xorshift(rng_state) % np.uint64(n_vertices))
                if other == j:
                    continue
                d2 = 0.0
                for d in range(dim):
                    diff = emb[j, d] - emb[other, d]
                    d2 += diff * diff
                if d2 > 0.0:
                    coeff = (2.0 * _REPULSION_STRENGTH * b) / (
                        (0.001 + d2) * (1.0 + a * d2**b)
                    )
                else:
                    coeff = 0.0
                for d in range(dim):
                    if coeff > 0.0:
                        g = _clip(coeff * (emb[j, d] - emb[other, d]), 4.0)
                    else:
                        g = 4.0  # coincident points: push apart at full clip
                    emb[j, d] += alpha * g
            epoch_of_next_negative_sample[e] += n_neg * epochs_per_negative_sample[e]
    return emb


class UmapModel:
    """Fitted reducer: training features, coordinates, and the smooth-kNN
    transform for unseen points."""

    def __init__(self, X: np.ndarray, coords: np.ndarray, config: EmbeddingConfig):
        self.X = np.asarray(X, dtype=np.float64)
        self.coords = np.asarray(coords, dtype=np.float64)
        self.config = config

    def transform(self, X_new: np.ndarray) -> np.ndarray:
        """Map new points into the learned space as the membership-weighted
        average of their k nearest training points' coordinates."""
        X_new = np.atleast_2d(np.asarray(X_new, dtype=np.float64))
        k = min(self.config.n_neighbors, self.X.shape[0])
        sq_train = np.einsum("ij,ij->i", self.X, self.X)
        sq_new = np.einsum("ij,ij->i", X_new, X_new)
        d2 = sq_new[:, None] + sq_train[None, :] - 2.0 * (X_new @ self.X.T)
        np.maximum(d2, 0.0, out=d2)
        idx = np.argpartition(d2, k - 1, axis=1)[:, :k]
        rows = np.arange(X_new.shape[0])[:, None]
        order = np.argsort(d2[rows, idx], axis=1, kind="stable")
        idx = idx[rows, order]
        dists = np.sqrt(d2[rows, idx])
        sigmas, rhos = smooth_knn_calibration(dists)
        w = np.exp(-np.maximum(dists - rhos[:, None], 0.0) / sigmas[:, None])
        w /= w.sum(axis=1, keepdims=True)
        return np.einsum("nk,nkd->nd", w, self.coords[idx])

    def save(self, path) -> None:
        np.savez(
            path,
            X=self.X,
            coords=self.coords,
            config=np.frombuffer(
                repr(self.config.as_dict()).encode("utf-8"), dtype=np.uint8
            ),
        )

    @classmethod
    def load(cls, path) -> "UmapModel":
        import ast

        data = np.load(path)
        cfg = ast.literal_eval(bytes(data["config"]).decode("utf-8"))
        return cls(X=data["X"], coords=data["coords"], config=EmbeddingConfig(**cfg))


def reduce_umap(
    X: np.ndarray,
    config: EmbeddingConfig | None = None,
    ids: list[str] | None = None,
    return_model: bool = False,
):
    """Embed X into ``config.n_components`` dimensions.

    Deterministic per seed: spectral init plus seeded jitter, a fixed
    edge schedule (each edge sampled with frequency proportional to its
    fuzzy weight), and an internal xorshift stream for negative samples.
    """
    config = config or EmbeddingConfig(method="umap")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n <= config.n_neighbors:
        raise ValueError("dataset must be larger than n_neighbors")
    ids = [str(i) for i in range(n)] if ids is None else list(ids)

    graph = fuzzy_graph(X, config.n_neighbors)
    rng = np.random.default_rng(config.seed)
    emb = spectral_init(graph, config.n_components, rng)

    # drop edges sampled less than once over the whole schedule
    pruned = graph.copy()
    pruned.data[pruned.data < pruned.data.max() / float(config.n_epochs)] = 0.0
    pruned.eliminate_zeros()
    coo = pruned.tocoo()
    weights = coo.data
    epochs_per_sample = weights.max() / weights  # sample frequency ~ weight

    a, b = fit_curve_params(config.min_dist)
    rng_state = np.array([rng.integers(1, 2**63 - 1, dtype=np.int64)], dtype=np.uint64)
    emb = _optimize_layout(
        emb.astype(np.float64),
        coo.row.astype(np.int64),
        coo.col.astype(np.int64),
        epochs_per_sample.astype(np.float64),
        float(a),
        float(b),
        int(config.n_epochs),
        float(config.learning_rate),
        float(config.negative_sample_rate),
        rng_state,
    )

    embedding = Embedding(
        coords=emb,
        ids=ids,
        config={**config.as_dict(), "method": "umap", "a": a, "b": b},
    )
    if return_model:
        return embedding, UmapModel(X, emb, config)
    return embedding

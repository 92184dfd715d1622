"""Shared embedding types: configuration, result container, scaling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

__all__ = ["EmbeddingConfig", "Embedding", "scale_components"]


@dataclass
class EmbeddingConfig:
    method: str = "umap"  # umap | pca | tsne
    n_components: int = 3
    n_neighbors: int = 10
    min_dist: float = 0.3
    seed: int = 32
    n_epochs: int = 200
    learning_rate: float = 1.0
    negative_sample_rate: int = 5
    perplexity: float = 30.0  # t-SNE only

    def __post_init__(self):
        if self.method not in ("umap", "pca", "tsne"):
            raise ValueError(f"unknown embedding method {self.method!r}")
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Embedding:
    """N x n_components coordinates plus provenance."""

    coords: np.ndarray
    ids: list[str]
    config: dict
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.shape[0] != len(self.ids):
            raise ValueError("row count must equal id count")
        if not np.isfinite(self.coords).all():
            raise ValueError("embedding coordinates must be finite")

    @property
    def n_components(self) -> int:
        return int(self.coords.shape[1])

    def __len__(self) -> int:
        return int(self.coords.shape[0])


def scale_components(emb: Embedding) -> Embedding:
    """Per-component min-max scaling to [0, 1]; a constant component maps
    to 0.5 with a warning."""
    if len(emb) == 0:
        raise ValueError("cannot scale an empty embedding")
    coords = emb.coords.copy()
    for j in range(coords.shape[1]):
        lo, hi = coords[:, j].min(), coords[:, j].max()
        if hi > lo:
            coords[:, j] = (coords[:, j] - lo) / (hi - lo)
        else:
            warnings.warn(f"component {j} is constant; mapped to 0.5")
            coords[:, j] = 0.5
    return Embedding(coords=coords, ids=list(emb.ids), config=dict(emb.config), info=dict(emb.info))

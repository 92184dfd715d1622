"""Dimensionality reduction of patch feature vectors."""

from .common import Embedding, EmbeddingConfig, scale_components
from .pca import reduce_pca
from .tsne import reduce_tsne
from .umap import UmapModel, reduce_umap

__all__ = [
    "Embedding",
    "EmbeddingConfig",
    "scale_components",
    "reduce_pca",
    "reduce_tsne",
    "reduce_umap",
    "UmapModel",
]

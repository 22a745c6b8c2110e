"""Dense, sparse, and integrated similarity scores.

Score matrices are oriented rows = texts, columns = images, so
text-to-image retrieval reads ranks along a row.  The temperature
applies to the dense score only and is stored in log space so
positivity is structural.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatchError, ShapeError
from .model import SparseVector


@dataclass
class Temperature:
    log_tau: float

    @classmethod
    def from_tau(cls, tau: float) -> "Temperature":
        if tau <= 0:
            raise ValueError("tau must be positive")
        return cls(log_tau=float(np.log(tau)))

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau))


@dataclass
class IntegrationWeights:
    """Mixing weights for the integrated score w_dense*s_dense + w_sparse*s_sparse."""

    w_dense: float
    w_sparse: float

    def __post_init__(self):
        if self.w_dense < 0 or self.w_sparse < 0:
            raise ValueError("integration weights must be non-negative")
        if self.w_dense + self.w_sparse <= 0:
            raise ValueError("at least one integration weight must be positive")


@dataclass
class ScoreTriple:
    """Pairwise score matrices for one batch (rows = texts, cols = images)."""

    s_dense: np.ndarray
    s_sparse: np.ndarray
    s_inter: np.ndarray

    def __post_init__(self):
        if not (self.s_dense.shape == self.s_sparse.shape == self.s_inter.shape):
            raise ShapeError("score matrices must share a shape")


def make_triple(s_dense: np.ndarray, s_sparse: np.ndarray,
                weights: IntegrationWeights) -> ScoreTriple:
    if s_dense.shape != s_sparse.shape:
        raise ShapeError("score matrices must share a shape")
    return ScoreTriple(
        s_dense=s_dense,
        s_sparse=s_sparse,
        s_inter=weights.w_dense * s_dense + weights.w_sparse * s_sparse,
    )


def dense_score(h_text: np.ndarray, h_image: np.ndarray, tau: float) -> float:
    """Temperature-scaled dot product of two dense embeddings."""
    h_text = np.asarray(h_text, dtype=np.float64)
    h_image = np.asarray(h_image, dtype=np.float64)
    if h_text.shape != h_image.shape or h_text.ndim != 1:
        raise ShapeError("dense embeddings must be matching 1-D vectors")
    if tau <= 0:
        raise ValueError("tau must be positive")
    return float(h_text @ h_image) / tau


def sparse_score(z_text: SparseVector, z_image: SparseVector) -> float:
    """Dot product of two sparse vectors by merging their sorted supports."""
    if z_text.dim != z_image.dim:
        raise ShapeError("sparse vectors must share a vocabulary size")
    total = 0.0
    i = j = 0
    ti, tw = z_text.indices, z_text.weights
    ii, iw = z_image.indices, z_image.weights
    while i < ti.size and j < ii.size:
        a, b = ti[i], ii[j]
        if a == b:
            total += tw[i] * iw[j]
            i += 1
            j += 1
        elif a < b:
            i += 1
        else:
            j += 1
    return total


def batch_scores(texts: list[tuple[np.ndarray, SparseVector]],
                 images: list[tuple[np.ndarray, SparseVector]],
                 tau: float, weights: IntegrationWeights) -> ScoreTriple:
    """All pairwise scores between encoded texts (rows) and images (cols)."""
    if not texts or not images:
        raise EmptyBatchError("batch_scores needs at least one text and one image")
    h_t = np.stack([np.asarray(h, dtype=np.float64) for h, _ in texts])
    h_i = np.stack([np.asarray(h, dtype=np.float64) for h, _ in images])
    if h_t.shape[1] != h_i.shape[1]:
        raise ShapeError("text and image embeddings must share a dimension")
    if tau <= 0:
        raise ValueError("tau must be positive")
    s_dense = (h_t @ h_i.T) / tau
    s_sparse = np.empty((len(texts), len(images)))
    for m, (_, z_t) in enumerate(texts):
        for j, (_, z_i) in enumerate(images):
            s_sparse[m, j] = sparse_score(z_t, z_i)
    return make_triple(s_dense, s_sparse, weights)

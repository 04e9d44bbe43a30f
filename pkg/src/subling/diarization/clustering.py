"""Cosine similarity and spectral clustering with eigengap model selection."""

from __future__ import annotations

import warnings
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from sklearn.cluster import KMeans

from subling.diarization.features import EmbeddingError

DEFAULT_K_MAX = 20
# Sharpens the clipped cosine affinity; 1 leaves it as plain cosine.
DEFAULT_AFFINITY_POWER = 8
EIG_TOL = 1e-8
KMEANS_MAX_ITER = 300


class ClusteringError(RuntimeError):
    pass


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise EmbeddingError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise EmbeddingError("cosine of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return np.clip(a @ b.T, -1.0, 1.0)


def normalized_laplacian(affinity: np.ndarray) -> np.ndarray:
    d = affinity.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return np.eye(len(d)) - inv_sqrt[:, None] * affinity * inv_sqrt[None, :]


def eigengap_count(eigenvalues: np.ndarray, k_max: int) -> int:
    """Cluster count at the largest gap among the smallest ``k_max + 1``
    eigenvalues (first maximum wins)."""
    top = min(k_max, len(eigenvalues) - 1)
    if top < 1:
        return 1
    gaps = np.diff(eigenvalues[: top + 1])
    return int(np.argmax(gaps)) + 1


def affinity_matrix(x: np.ndarray, power: float = DEFAULT_AFFINITY_POWER) -> np.ndarray:
    """Cosine affinity clipped to [0, 1] and raised elementwise to ``power``.

    Without sharpening, a common component shared by all speakers (pairwise
    cosines around 0.2 to 0.5) fills the off-diagonal blocks and the largest
    eigengap collapses to a single cluster.
    """
    aff = np.clip(cosine_matrix(x, x), 0.0, 1.0) ** power
    return (aff + aff.T) / 2


def spectral_cluster(embeddings: Sequence, k_max: int = DEFAULT_K_MAX, seed: int = 0,
                     n_clusters: Optional[int] = None,
                     affinity_power: float = DEFAULT_AFFINITY_POWER) -> list[int]:
    """Cluster embeddings on a clipped-cosine affinity graph.

    Returns labels in ``1..k`` numbered by first appearance. ``n_clusters``
    bypasses the eigengap estimate.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ClusteringError("spectral clustering needs at least 2 embeddings")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if affinity_power <= 0:
        raise ValueError("affinity_power must be positive")
    lap = normalized_laplacian(affinity_matrix(x, affinity_power))
    try:
        vals, vecs = scipy.linalg.eigh(lap)
    except np.linalg.LinAlgError as exc:
        raise ClusteringError(f"eigensolver failed to converge (tolerance {EIG_TOL:g}): {exc}") from exc
    residual = np.abs(lap @ vecs - vecs * vals).max()
    if not np.isfinite(residual) or residual > EIG_TOL * max(1.0, n):
        raise ClusteringError(f"eigensolver residual {residual:.3g} exceeds tolerance {EIG_TOL:g}")

    k = n_clusters if n_clusters is not None else eigengap_count(vals, k_max)
    if k > n:
        raise ClusteringError(f"{n} embeddings cannot form {k} clusters")
    if k <= 1:
        return [1] * n

    u = vecs[:, :k]
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    u = u / np.where(norms == 0, 1.0, norms)
    with warnings.catch_warnings():
        # duplicate rows make sklearn warn about fewer distinct points
        warnings.simplefilter("ignore")
        raw = KMeans(n_clusters=k, n_init=10, max_iter=KMEANS_MAX_ITER,
                     random_state=seed).fit_predict(u)
    relabel: dict[int, int] = {}
    return [relabel.setdefault(int(c), len(relabel) + 1) for c in raw]

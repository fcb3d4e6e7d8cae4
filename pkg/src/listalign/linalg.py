"""Dense linear-algebra kernels: PCA, k-means, orthogonal Procrustes, percentiles.

Matrices are 2-D float64 ndarrays throughout; 32-bit input is widened on entry.
Everything here is deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, ShapeMismatch

__all__ = [
    "PcaModel",
    "KmeansModel",
    "as_matrix",
    "pca_fit",
    "kmeans_fit",
    "kmeans_refine",
    "procrustes",
    "percentiles",
]


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Validate and widen an array to a finite 2-D float64 matrix."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name}: expected a 2-D array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise DegenerateInput(f"{name}: contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class PcaModel:
    """Principal components of a data matrix.

    mean: (d,) column means of the fitting data.
    components: (k, d) orthonormal rows, ordered by decreasing variance.
    explained_variance: (k,) variance captured by each component.
    """

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    def project(self, x) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.mean.shape[0]:
            raise ShapeMismatch(
                f"project: expected {self.mean.shape[0]} columns, got {x.shape[1]}"
            )
        return (x - self.mean) @ self.components.T

    def reconstruct(self, y) -> np.ndarray:
        y = as_matrix(y)
        if y.shape[1] != self.components.shape[0]:
            raise ShapeMismatch(
                f"reconstruct: expected {self.components.shape[0]} columns, got {y.shape[1]}"
            )
        return y @ self.components + self.mean


def pca_fit(x, k: int) -> PcaModel:
    """Fit a k-component PCA via SVD of the centered data matrix.

    Requires n >= 2 rows and 1 <= k <= min(n, d). Components use the sign
    convention that each row's largest-magnitude entry is non-negative.
    """
    x = as_matrix(x)
    n, d = x.shape
    if n < 2:
        raise DegenerateInput(f"pca_fit: need at least 2 rows, got {n}")
    if not 1 <= k <= min(n, d):
        raise DegenerateInput(f"pca_fit: k={k} outside [1, min(n={n}, d={d})]")

    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k]
    # Fix signs so repeated fits of equivalent data agree.
    pivot = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(k), pivot])
    signs[signs == 0] = 1.0
    components = components * signs[:, None]
    explained = (s[:k] ** 2) / (n - 1)
    return PcaModel(mean=mean, components=components, explained_variance=explained)


@dataclass(frozen=True)
class KmeansModel:
    """centroids: (k, d); inertia: final within-cluster sum of squared distances."""

    centroids: np.ndarray
    inertia: float
    inertia_history: np.ndarray = field(default_factory=lambda: np.empty(0))

    def assign(self, x) -> np.ndarray:
        """Index of the nearest centroid per row (ties go to the lowest index)."""
        x = as_matrix(x)
        if x.shape[1] != self.centroids.shape[1]:
            raise ShapeMismatch(
                f"assign: expected {self.centroids.shape[1]} columns, got {x.shape[1]}"
            )
        return np.argmin(_sq_dists(x, self.centroids), axis=1)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Pairwise squared euclidean distances, (n, k)."""
    # ||x-c||^2 expanded; clip tiny negatives from cancellation.
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * (x @ c.T)
        + np.sum(c * c, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _plus_plus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = _sq_dists(x, centroids[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = x[idx]
        d2 = np.minimum(d2, _sq_dists(x, centroids[j : j + 1])[:, 0])
    return centroids


def _lloyd(x: np.ndarray, centroids: np.ndarray, iters: int):
    """Lloyd iterations with farthest-point reseeding of empty clusters.

    Returns (centroids, inertia_history). The history starts at the inertia of
    the incoming centroids and is non-increasing.
    """
    k = centroids.shape[0]
    centroids = centroids.copy()
    labels = np.argmin(_sq_dists(x, centroids), axis=1)
    # Direct differences for the cost: exact zero when a point sits on its centroid.
    point_cost = np.sum((x - centroids[labels]) ** 2, axis=1)
    history = [float(point_cost.sum())]

    for _ in range(iters):
        new_centroids = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        new_centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            # Each empty cluster takes the point currently farthest from its
            # centroid; that point's cost is zeroed so the next empty cluster
            # picks a different one.
            cost = point_cost.copy()
            for j in np.flatnonzero(~nonempty):
                far = int(np.argmax(cost))
                new_centroids[j] = x[far]
                cost[far] = 0.0
        prev_labels = labels
        centroids = new_centroids
        labels = np.argmin(_sq_dists(x, centroids), axis=1)
        point_cost = np.sum((x - centroids[labels]) ** 2, axis=1)
        history.append(float(point_cost.sum()))
        if np.array_equal(labels, prev_labels):
            break
    return centroids, np.asarray(history)


def kmeans_fit(x, k: int, iters: int = 25, seed: int = 0) -> KmeansModel:
    """k-means with kmeans++ init and Lloyd refinement.

    Deterministic for a fixed seed. Empty clusters are reseeded from the point
    farthest from its assigned centroid. Requires n >= k >= 1.
    """
    x = as_matrix(x)
    n = x.shape[0]
    if k < 1:
        raise DegenerateInput(f"kmeans_fit: k must be >= 1, got {k}")
    if n < k:
        raise DegenerateInput(f"kmeans_fit: need n >= k, got n={n}, k={k}")
    if iters < 0:
        raise DegenerateInput(f"kmeans_fit: iters must be >= 0, got {iters}")
    rng = np.random.default_rng(seed)
    centroids = _plus_plus_init(x, k, rng)
    centroids, history = _lloyd(x, centroids, iters)
    return KmeansModel(centroids=centroids, inertia=float(history[-1]), inertia_history=history)


def kmeans_refine(x, centroids, iters: int = 25) -> KmeansModel:
    """Continue Lloyd iterations from existing centroids (no re-initialization)."""
    x = as_matrix(x)
    centroids = as_matrix(centroids, "centroids")
    if x.shape[1] != centroids.shape[1]:
        raise ShapeMismatch(
            f"kmeans_refine: data has {x.shape[1]} columns, centroids {centroids.shape[1]}"
        )
    if x.shape[0] < centroids.shape[0]:
        raise DegenerateInput("kmeans_refine: need n >= k")
    out, history = _lloyd(x, centroids, iters)
    return KmeansModel(centroids=out, inertia=float(history[-1]), inertia_history=history)


def procrustes(a, b) -> np.ndarray:
    """Orthogonal matrix R minimizing ||A R - B||_F.

    A and B must have the same (n, d) shape with n >= d. Classical solution:
    R = U V^T from the SVD of A^T B.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeMismatch(f"procrustes: shapes differ, {a.shape} vs {b.shape}")
    n, d = a.shape
    if n < d:
        raise DegenerateInput(f"procrustes: need n >= d, got n={n}, d={d}")
    u, _, vt = np.linalg.svd(a.T @ b)
    return u @ vt


def percentiles(values, ps) -> np.ndarray:
    """Percentiles by linear interpolation between order statistics.

    ps are fractions in [0, 1]. Matches the convention where the p-th
    percentile of [1..100] at p=0.5 is 50.5.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise DegenerateInput("percentiles: empty values")
    if not np.isfinite(values).all():
        raise DegenerateInput("percentiles: values contain NaN or Inf")
    ps = np.atleast_1d(np.asarray(ps, dtype=np.float64))
    if ps.size == 0 or np.any(ps < 0.0) or np.any(ps > 1.0):
        raise DegenerateInput("percentiles: fractions must lie in [0, 1]")
    return np.quantile(values, ps, method="linear")

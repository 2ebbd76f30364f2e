"""Lloyd's k-means with k-means++ seeding on raw feature vectors."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

MAX_ITERS = 100


def _plusplus_seed(points: np.ndarray, k: int, rng) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))  # all points coincide with a centroid
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
        centroids[i] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[i]) ** 2, axis=1))
    return centroids


def kmeans(points, k: int, seed=0, max_iters: int = MAX_ITERS):
    """Cluster rows of ``points`` into ``k`` non-empty clusters.

    Runs Lloyd iterations to an assignment fixpoint (or ``max_iters``).
    Empty clusters are re-seeded to the point farthest from its assigned
    centroid. Returns (assignments, centroids).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        points = points.reshape(len(points), -1)
    n = len(points)
    if k < 1:
        raise ConfigError("k must be >= 1")
    if k > n:
        raise ConfigError(f"k={k} exceeds number of points n={n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    centroids = _plusplus_seed(points, k, rng)
    assign = None
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        for c in range(k):
            members = new_assign == c
            if not members.any():
                # re-seed to the farthest point, stealing only from clusters
                # that keep at least one member afterwards
                counts = np.bincount(new_assign, minlength=k)
                eligible = counts[new_assign] > 1
                dist_own = np.where(eligible, d2[np.arange(n), new_assign], -1.0)
                far = int(np.argmax(dist_own))
                new_assign[far] = c
                centroids[c] = points[far]
                members = new_assign == c
            centroids[c] = points[members].mean(axis=0)
        if assign is not None and np.array_equal(assign, new_assign):
            assign = new_assign
            break
        assign = new_assign
    return assign, centroids


def distortion(points, assign, centroids) -> float:
    points = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    return float(((points - centroids[assign]) ** 2).sum())

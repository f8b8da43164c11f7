"""Density-peaks clustering with k-nearest-neighbor local density.

The density of a point is exp(-mean distance to its k nearest neighbors),
self excluded. The separation delta of a point is its distance to the
nearest denser point, or to the farthest point when nothing is denser.
Cluster centers are the n_clusters highest density*separation products;
everything else joins the Euclidean-nearest center. All tie breaks go to
the lower index so results are reproducible across runs and platforms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidInput, ShapeError


@dataclass
class ClusterResult:
    center_indices: np.ndarray  # point indices of the centers, selection-rank order
    assignment: np.ndarray  # point -> center rank in [0, n_clusters)
    sizes: np.ndarray  # cluster sizes by center rank, sums to L

    def point_sizes(self) -> np.ndarray:
        """Size of the cluster each point belongs to, per point."""
        return self.sizes[self.assignment]


def _validated_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected points as a 2-D array, got ndim={x.ndim}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("points must be finite")
    return x


def _pairwise(x: np.ndarray) -> np.ndarray:
    # direct pairwise euclidean; the |a|^2+|b|^2-2ab shortcut loses the
    # translation invariance the tests pin down
    return cdist(x, x, metric="euclidean")


def dpc_local_density(x, k: int) -> np.ndarray:
    """exp(-mean distance to the k nearest neighbors), self excluded."""
    x = _validated_points(x)
    n = x.shape[0]
    if not 1 <= k <= n - 1:
        raise InvalidInput(f"k must satisfy 1 <= k <= {n - 1}, got {k}")
    dist = _pairwise(x)
    np.fill_diagonal(dist, np.inf)
    knn = np.partition(dist, k - 1, axis=1)[:, :k]
    return np.exp(-knn.mean(axis=1))


def dpc_delta(x, rho) -> np.ndarray:
    """Distance to the nearest strictly denser point, else to the farthest point."""
    x = _validated_points(x)
    rho = np.asarray(rho, dtype=np.float64)
    n = x.shape[0]
    if rho.shape != (n,):
        raise ShapeError(f"rho must have shape ({n},), got {rho.shape}")
    dist = _pairwise(x)
    delta = np.empty(n)
    for i in range(n):
        higher = rho > rho[i]
        if higher.any():
            delta[i] = dist[i, higher].min()
        else:
            delta[i] = dist[i].max()
    return delta


def dpc_cluster(x, k: int, n_clusters: int) -> ClusterResult:
    """Full density-peaks clustering.

    Centers are the n_clusters points with the highest density*separation,
    ties resolved toward the lower point index. Centers always belong to
    their own cluster; every other point joins the nearest center, distance
    ties resolved toward the lower center rank.
    """
    x = _validated_points(x)
    n = x.shape[0]
    if not 1 <= n_clusters <= n:
        raise InvalidInput(f"n_clusters must satisfy 1 <= n_clusters <= {n}")
    rho = dpc_local_density(x, k)
    delta = dpc_delta(x, rho)
    gamma = rho * delta
    order = np.lexsort((np.arange(n), -gamma))
    centers = order[:n_clusters].astype(np.int64)

    dist_to_centers = cdist(x, x[centers], metric="euclidean")
    assignment = np.argmin(dist_to_centers, axis=1).astype(np.int64)
    assignment[centers] = np.arange(n_clusters, dtype=np.int64)
    sizes = np.bincount(assignment, minlength=n_clusters).astype(np.int64)
    return ClusterResult(centers, assignment, sizes)

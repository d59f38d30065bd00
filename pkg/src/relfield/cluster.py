"""Clustering on the unit sphere and the angular distance between clusterings.

Spherical k-means assigns by cosine similarity and recenters on the
normalized member mean; two clusterings are compared by optimally
matching centroids (Hungarian on angular costs) and averaging the
matched centroid angles plus spread differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import ContractViolation

MAX_KMEANS_ITER = 100


class ClusteringError(ValueError):
    """Population too small or otherwise unusable for clustering."""


@dataclass
class Clustering:
    centroids: np.ndarray   # (K, E), unit rows
    sigmas: np.ndarray      # (K,), radians
    counts: np.ndarray      # (K,), ints summing to the population
    labels: np.ndarray | None = None  # (N,) member assignment, optional

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def to_dict(self) -> dict:
        return {
            "centroids": self.centroids.tolist(),
            "sigmas": self.sigmas.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Clustering":
        return cls(
            centroids=np.asarray(d["centroids"], dtype=np.float64),
            sigmas=np.asarray(d["sigmas"], dtype=np.float64),
            counts=np.asarray(d["counts"], dtype=np.int64),
        )


@dataclass
class Assignment:
    permutation: list[int]  # row i of the cost matrix matched to column permutation[i]
    total_cost: float


def _clip_dot(x):
    # absorb rounding just above |1| so arccos never sees NaN
    return np.clip(x, -1.0, 1.0)


def _unit_angle(diff_norm):
    # arccos of the dot is ill-conditioned near 1; the half-chord form is
    # the same angle for unit vectors and exact at zero separation
    return 2.0 * np.arcsin(np.clip(diff_norm / 2.0, 0.0, 1.0))


def angular_std(centroid: np.ndarray, members: np.ndarray) -> float:
    """Root-mean-square angular (arccos) deviation of members from the centroid."""
    members = np.atleast_2d(members)
    if members.shape[0] == 0:
        raise ContractViolation("angular_std needs at least one member")
    ang = _unit_angle(np.linalg.norm(members - centroid, axis=-1))
    return float(np.sqrt(np.mean(ang ** 2)))


def _plus_plus_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding with squared angular distance weights."""
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    for _ in range(k - 1):
        sims = _clip_dot(x @ x[chosen].T)
        d = np.arccos(np.max(sims, axis=1))
        w = d ** 2
        total = w.sum()
        if total <= 0:
            # all remaining points coincide with chosen centroids
            remaining = [i for i in range(n) if i not in chosen]
            chosen.append(remaining[0] if remaining else chosen[-1])
            continue
        chosen.append(int(rng.choice(n, p=w / total)))
    return x[chosen].copy()


def spherical_kmeans(embeddings: np.ndarray, k: int, seed: int,
                     max_iter: int = MAX_KMEANS_ITER,
                     objective_trace: list | None = None) -> Clustering:
    """Cluster unit vectors by cosine similarity.

    Iterates assignment (argmax cosine, ties to the lowest cluster index)
    and recentering (normalized member mean) until the assignment stops
    changing or max_iter; empty clusters are re-seeded from the point
    currently farthest from its own centroid. Pass a list as
    objective_trace to collect the post-assignment objective per iteration.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ClusteringError("embeddings must be a (N, E) array")
    n = x.shape[0]
    if n < k:
        raise ClusteringError(f"population {n} smaller than K={k}")
    rng = np.random.default_rng(seed)
    centroids = _plus_plus_seed(x, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        sims = x @ centroids.T
        new_labels = np.argmax(sims, axis=1)
        if objective_trace is not None:
            objective_trace.append(float(sims[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        own = sims[np.arange(n), labels]
        reseeded = set()
        for j in range(k):
            members = x[labels == j]
            if members.shape[0] == 0:
                order = np.argsort(own, kind="stable")
                pick = next((int(i) for i in order if int(i) not in reseeded),
                            int(order[0]))
                reseeded.add(pick)
                centroids[j] = x[pick]
                continue
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm <= 1e-12:
                order = np.argsort(own, kind="stable")
                pick = next((int(i) for i in order if int(i) not in reseeded),
                            int(order[0]))
                reseeded.add(pick)
                centroids[j] = x[pick]
            else:
                centroids[j] = mean / norm
    sigmas = np.zeros(k)
    counts = np.zeros(k, dtype=np.int64)
    for j in range(k):
        members = x[labels == j]
        counts[j] = members.shape[0]
        if counts[j] > 0:
            sigmas[j] = angular_std(centroids[j], members)
    return Clustering(centroids=centroids, sigmas=sigmas, counts=counts,
                      labels=labels)


def kmeans_objective(x: np.ndarray, clustering: Clustering) -> float:
    """Sum of cosines to the assigned centroid (higher is tighter)."""
    sims = x @ clustering.centroids.T
    return float(sims[np.arange(x.shape[0]), clustering.labels].sum())


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-total-cost perfect matching of a square cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ContractViolation("hungarian requires finite costs")
    rows, cols = linear_sum_assignment(cost)
    perm = [0] * cost.shape[0]
    for r, c in zip(rows, cols):
        perm[r] = int(c)
    return Assignment(permutation=perm, total_cost=float(cost[rows, cols].sum()))


def centroid_angles(a: Clustering, b: Clustering) -> np.ndarray:
    diff = a.centroids[:, None, :] - b.centroids[None, :, :]
    return _unit_angle(np.linalg.norm(diff, axis=-1))


def clustering_distance(a: Clustering, b: Clustering) -> float:
    """Mean matched centroid angle plus spread difference, in radians.

    Centroids are matched by the Hungarian algorithm on angular costs;
    zero iff matched centroids and spreads coincide.
    """
    if a.k != b.k:
        raise ContractViolation(f"clustering K mismatch: {a.k} vs {b.k}")
    angles = centroid_angles(a, b)
    assignment = hungarian(angles)
    total = 0.0
    for i, j in enumerate(assignment.permutation):
        total += angles[i, j] + abs(a.sigmas[i] - b.sigmas[j])
    return total / a.k


def padded_match_cost(partial: Clustering, full: Clustering) -> float:
    """clustering_distance allowing partial.k <= full.k.

    The smaller clustering is matched into the larger one; each unmatched
    cluster of `full` contributes pi/2 plus its own spread, keeping the
    cost finite and monotone in the missing mass. Equal K reduces to
    clustering_distance exactly.
    """
    if partial.k > full.k:
        raise ContractViolation("padded_match_cost expects partial.k <= full.k")
    diff = partial.centroids[:, None, :] - full.centroids[None, :, :]
    angles = _unit_angle(np.linalg.norm(diff, axis=-1))
    rows, cols = linear_sum_assignment(angles)
    total = 0.0
    matched = set()
    for r, c in zip(rows, cols):
        total += angles[r, c] + abs(partial.sigmas[r] - full.sigmas[c])
        matched.add(int(c))
    for j in range(full.k):
        if j not in matched:
            total += np.pi / 2 + full.sigmas[j]
    return total / full.k

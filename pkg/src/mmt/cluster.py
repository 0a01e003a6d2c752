"""Per-epoch hard pseudo-label generation: seeded k-means over the current
target features."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .diffcore import no_grad
from .errors import ClusteringError
from .model import encode


@dataclass
class PseudoLabeling:
    assignments: np.ndarray  # sample index -> class in [0, num_clusters)
    centroids: np.ndarray
    inertia: float
    epoch: int = 0
    inertia_trace: list = field(default_factory=list)
    init_indices: list = field(default_factory=list)

    @property
    def num_clusters(self):
        return self.centroids.shape[0]


def _sq_dist(points, centroids):
    # (x - c)^2 expanded; clip tiny negatives from cancellation
    d2 = (
        (points * points).sum(axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(points, k, rng):
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass at distance zero: fall back to uniform draw
            chosen.append(int(rng.integers(n)))
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r))
            chosen.append(min(idx, n - 1))
        d2 = np.minimum(d2, ((points - points[chosen[-1]]) ** 2).sum(axis=1))
    return chosen


def kmeans(features, num_clusters, seed, max_iter=100, init_indices=None):
    """Lloyd iterations from a k-means++ start, run to an assignment fixpoint
    or ``max_iter``. Emptied clusters are re-seeded with the point currently
    farthest from its assigned centroid. The recorded inertia trace is
    non-increasing."""
    points = np.asarray(features, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n, dim = points.shape
    if n < num_clusters:
        raise ClusteringError(f"cannot form {num_clusters} clusters from {n} samples")
    if dim < 1 or num_clusters < 1:
        raise ClusteringError("need at least one feature dimension and one cluster")

    rng = np.random.default_rng(seed)
    if init_indices is None:
        init_indices = _kmeanspp_init(points, num_clusters, rng)
    centroids = points[list(init_indices)].copy()

    trace = []
    prev_assign = None
    assign = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d2 = _sq_dist(points, centroids)
        assign = d2.argmin(axis=1)  # ties resolve to the lowest index

        counts = np.bincount(assign, minlength=num_clusters)
        empties = np.flatnonzero(counts == 0)
        if empties.size:
            current = d2[np.arange(n), assign]
            order = np.argsort(-current, kind="stable")
            cursor = 0
            for e in empties:
                while cursor < len(order):
                    j = int(order[cursor])
                    cursor += 1
                    if counts[assign[j]] > 1:
                        counts[assign[j]] -= 1
                        assign[j] = e
                        counts[e] = 1
                        centroids[e] = points[j]
                        break

        for c in range(num_clusters):
            members = assign == c
            if members.any():
                centroids[c] = points[members].mean(axis=0)

        inertia = float(_sq_dist(points, centroids)[np.arange(n), assign].sum())
        trace.append(inertia)
        if prev_assign is not None and np.array_equal(prev_assign, assign):
            break
        prev_assign = assign.copy()

    if np.isnan(centroids).any():
        raise ClusteringError("k-means produced NaN centroids")
    return PseudoLabeling(
        assignments=assign,
        centroids=centroids,
        inertia=trace[-1],
        inertia_trace=trace,
        init_indices=list(init_indices),
    )


def align_to_previous(labeling, prev_assignments):
    """Rename cluster indices to maximize agreement with a previous epoch's
    assignment (greedy on the overlap counts). Pure gauge fix: contents of
    the clustering are unchanged, so persisted classifier heads keep
    approximately stable class semantics across epochs."""
    prev = np.asarray(prev_assignments)
    if prev.shape != labeling.assignments.shape:
        raise ClusteringError("previous assignment length does not match")
    k = labeling.num_clusters
    overlap = np.zeros((k, k), dtype=int)
    np.add.at(overlap, (labeling.assignments, prev), 1)
    perm = -np.ones(k, dtype=int)
    taken = np.zeros(k, dtype=bool)
    order = np.dstack(np.unravel_index(np.argsort(-overlap, axis=None, kind="stable"), overlap.shape))[0]
    for new, old in order:
        if perm[new] < 0 and not taken[old]:
            perm[new] = old
            taken[old] = True
    for new in range(k):
        if perm[new] < 0:
            perm[new] = int(np.flatnonzero(~taken)[0])
            taken[perm[new]] = True
    labeling.assignments = perm[labeling.assignments]
    inverse = np.argsort(perm)
    labeling.centroids = labeling.centroids[inverse]
    return labeling


def relabel_epoch(pair, target_data, num_clusters, seed, epoch=0, feature_source="avg1", normalize=True):
    """Cluster the current features of the target samples and write the
    resulting hard pseudo labels back onto them.

    Features come from the temporal-average model by default (the more
    reliable inference artifact); ``feature_source="net1"`` clusters on the
    raw network instead, for ablation.
    """
    sources = {"avg1": pair.avg1, "net1": pair.net1, "avg2": pair.avg2, "net2": pair.net2}
    if feature_source not in sources:
        raise ClusteringError(f"unknown feature source {feature_source!r}")
    vectors = np.stack([s.vector for s in target_data])
    with no_grad():
        feats = encode(vectors, sources[feature_source].encoder).data
    if normalize:
        feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    labeling = kmeans(feats, num_clusters, seed)
    labeling.epoch = epoch
    for sample, label in zip(target_data, labeling.assignments):
        sample.pseudo_label = int(label)
    return labeling


def export_csv(labeling, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_index", "pseudo_label"])
        for i, label in enumerate(labeling.assignments):
            writer.writerow([i, int(label)])

"""
Online Deep Clustering
Memory-bank clustering of sensor spatial features: nearest-centroid pseudo
labels, class-balanced cluster loss, per-cluster confidence split, empty
cluster recovery and convergence monitoring.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import log_softmax

from .nnprims.similarity import percentile

logger = logging.getLogger(__name__)

EMPTY_CLUSTER_NOISE = 1e-4


@dataclass
class ClusterState:
    centroids: np.ndarray  # (K, d)
    memory: np.ndarray  # (N, d), unit rows
    labels: np.ndarray  # (N,)
    cluster_sizes: np.ndarray  # (K,)
    confident: np.ndarray  # (N,) bool

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def num_samples(self) -> int:
        return self.memory.shape[0]

    def member_distances(self) -> np.ndarray:
        """Distance of every memory feature to its own centroid."""
        diff = self.memory.astype(np.float64) - self.centroids[self.labels].astype(np.float64)
        return np.sqrt(np.sum(diff * diff, axis=1))

    def check(self):
        """Assert the bookkeeping invariants."""
        counts = np.bincount(self.labels, minlength=self.num_clusters)
        assert counts.sum() == self.num_samples, "cluster sizes do not cover every sample"
        assert np.array_equal(counts, self.cluster_sizes), "cluster sizes out of sync with labels"
        assert np.all(np.isfinite(self.centroids)), "nonfinite centroid"

    def to_sections(self) -> Dict[str, np.ndarray]:
        return {
            "centroids": self.centroids,
            "memory": self.memory,
            "labels": self.labels.astype(np.float32),
            "confident": self.confident.astype(np.float32),
        }

    @classmethod
    def from_sections(cls, sections: Dict[str, np.ndarray]) -> "ClusterState":
        centroids = np.array(sections["centroids"], dtype=np.float32)
        labels = np.rint(sections["labels"]).astype(np.int64)
        return cls(centroids=centroids,
                   memory=np.array(sections["memory"], dtype=np.float32),
                   labels=labels,
                   cluster_sizes=np.bincount(labels, minlength=centroids.shape[0]),
                   confident=sections["confident"] > 0.5)


@dataclass
class ConfidenceSplit:
    confident: np.ndarray  # sample indices
    ambiguous: np.ndarray  # sample indices
    thresholds: np.ndarray  # (K,)

    @property
    def confident_fraction(self) -> float:
        total = self.confident.size + self.ambiguous.size
        return self.confident.size / total if total else 0.0


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    norms = np.sqrt(np.sum(x64 * x64, axis=1, keepdims=True))
    return (x64 / np.maximum(norms, 1e-12)).astype(x.dtype)


def assign_pseudo_labels(features: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest centroid by Euclidean distance; ties go to the lowest index.

    Returns:
        Tuple of (labels (N,), distances to the assigned centroid (N,))
    """
    if centroids.shape[0] < 2:
        raise ValueError(f"Need at least 2 centroids, got {centroids.shape[0]}")
    if not np.all(np.isfinite(features)):
        raise ValueError("Nonfinite feature passed to assign_pseudo_labels")
    diff = features.astype(np.float64)[:, None, :] - centroids.astype(np.float64)[None, :, :]
    distances = np.sqrt(np.sum(diff * diff, axis=2))
    labels = np.argmin(distances, axis=1)
    return labels, distances[np.arange(labels.size), labels]


def cluster_logits(features: np.ndarray, centroids: np.ndarray, tau: float) -> np.ndarray:
    """-|f_i - c_k|^2 / tau, the logits behind cluster probabilities."""
    diff = features.astype(np.float64)[:, None, :] - centroids.astype(np.float64)[None, :, :]
    return -np.sum(diff * diff, axis=2) / tau


def balanced_weights(cluster_sizes: np.ndarray) -> np.ndarray:
    sizes = np.asarray(cluster_sizes, dtype=np.float64)
    return np.where(sizes > 0, 1.0 / np.sqrt(np.maximum(sizes, 1.0)), 0.0)


def cluster_loss(probs: np.ndarray, labels: np.ndarray, cluster_sizes: np.ndarray) -> float:
    """Class-balanced cross-entropy, -(1/N) sum_i w_{y_i} log p_{i,y_i}, w_k = |C_k|^-1/2."""
    probs = np.asarray(probs, dtype=np.float64)
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("Cluster probability rows must sum to 1")
    sizes = np.asarray(cluster_sizes)
    assert np.all(sizes[labels] > 0), "sample assigned to an empty cluster"
    weights = balanced_weights(sizes)[labels]
    picked = probs[np.arange(labels.size), labels]
    return float(-np.mean(weights * np.log(picked)))


def cluster_loss_with_grad(features: np.ndarray, centroids: np.ndarray, labels: np.ndarray,
                           cluster_sizes: np.ndarray, tau: float):
    """Cluster loss on softmax(-d^2/tau) with gradients for features and centroids.

    Returns:
        Tuple of (loss, probabilities, d_features, d_centroids)
    """
    n = features.shape[0]
    sizes = np.asarray(cluster_sizes)
    assert np.all(sizes[labels] > 0), "sample assigned to an empty cluster"
    log_probs = log_softmax(cluster_logits(features, centroids, tau), axis=1)
    probs = np.exp(log_probs)
    weights = balanced_weights(sizes)[labels]
    loss = float(-np.sum(weights * log_probs[np.arange(n), labels]) / n)

    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    d_features, d_centroids = cluster_logits_backward((weights / n)[:, None] * (probs - onehot),
                                                      features, centroids, tau)
    return loss, probs, d_features, d_centroids


def cluster_logits_backward(d_logits: np.ndarray, features: np.ndarray, centroids: np.ndarray,
                            tau: float) -> Tuple[np.ndarray, np.ndarray]:
    """Chain a gradient w.r.t. cluster_logits into features and centroids."""
    f64 = features.astype(np.float64)
    c64 = centroids.astype(np.float64)
    row = d_logits.sum(axis=1, keepdims=True)
    col = d_logits.sum(axis=0)[:, None]
    d_features = (-2.0 / tau) * (f64 * row - d_logits @ c64)
    d_centroids = (2.0 / tau) * (d_logits.T @ f64 - c64 * col)
    return d_features, d_centroids


def _recompute_centroids(state: ClusterState, clusters) -> None:
    for k in clusters:
        members = state.labels == k
        if np.any(members):
            state.centroids[k] = state.memory[members].astype(np.float64).mean(axis=0)


def update_memory_and_centroids(state: ClusterState, indices: np.ndarray, features: np.ndarray,
                                momentum_mem: float) -> ClusterState:
    """Blend fresh features into the memory bank, relabel them, refresh touched centroids."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= state.num_samples):
        raise IndexError(f"Memory indices out of range [0, {state.num_samples})")

    blended = momentum_mem * state.memory[indices].astype(np.float64) \
        + (1.0 - momentum_mem) * features.astype(np.float64)
    state.memory[indices] = _unit_rows(blended).astype(state.memory.dtype)

    old = state.labels[indices]
    new, _ = assign_pseudo_labels(state.memory[indices], state.centroids)
    state.labels[indices] = new
    state.cluster_sizes = np.bincount(state.labels, minlength=state.num_clusters)
    _recompute_centroids(state, np.union1d(old, new))
    return state


def handle_empty_clusters(state: ClusterState, rng: np.random.Generator) -> int:
    """Re-seed empty clusters from random members of the largest cluster.

    Returns:
        Number of clusters that were re-seeded
    """
    if state.num_clusters > state.num_samples:
        raise ValueError(f"Cannot keep {state.num_clusters} clusters nonempty with "
                         f"{state.num_samples} samples")
    reseeded = 0
    for k in np.nonzero(state.cluster_sizes == 0)[0]:
        largest = int(np.argmax(state.cluster_sizes))
        members = np.nonzero(state.labels == largest)[0]
        member = int(rng.choice(members))
        noise = rng.normal(0.0, EMPTY_CLUSTER_NOISE, size=state.centroids.shape[1])
        state.centroids[k] = state.memory[member] + noise
        state.labels[member] = k
        state.cluster_sizes[largest] -= 1
        state.cluster_sizes[k] += 1
        _recompute_centroids(state, [largest])
        reseeded += 1
        logger.debug(f"Re-seeded empty cluster {k} from cluster {largest}")
    return reseeded


def confidence_split_from_distances(labels: np.ndarray, distances: np.ndarray, num_clusters: int,
                                    percentile_p: float = 75.0) -> ConfidenceSplit:
    """Per cluster, members at or below the p-th percentile distance are confident."""
    thresholds = np.zeros(num_clusters)
    confident = np.zeros(labels.size, dtype=bool)
    for k in range(num_clusters):
        members = labels == k
        if not np.any(members):
            raise ValueError(f"Cluster {k} is empty; handle empty clusters before the confidence split")
        thresholds[k] = percentile(distances[members], percentile_p)
        confident[members] = distances[members] <= thresholds[k]
    return ConfidenceSplit(confident=np.nonzero(confident)[0], ambiguous=np.nonzero(~confident)[0],
                           thresholds=thresholds)


def confidence_split(state: ClusterState, percentile_p: float = 75.0) -> ConfidenceSplit:
    split = confidence_split_from_distances(state.labels, state.member_distances(),
                                            state.num_clusters, percentile_p)
    state.confident = np.zeros(state.num_samples, dtype=bool)
    state.confident[split.confident] = True
    return split


def label_change_rate(labels_prev: np.ndarray, labels_now: np.ndarray) -> float:
    labels_prev = np.asarray(labels_prev)
    labels_now = np.asarray(labels_now)
    if labels_prev.shape != labels_now.shape:
        raise ValueError(f"Label arrays differ in length: {labels_prev.shape} vs {labels_now.shape}")
    if labels_prev.size == 0:
        return 0.0
    return float(np.count_nonzero(labels_prev != labels_now) / labels_prev.size)


def init_cluster_state(features: np.ndarray, num_clusters: int, rng: np.random.Generator) -> ClusterState:
    """Memory from normalized features; centroids by farthest-point seeding."""
    if num_clusters > features.shape[0]:
        raise ValueError(f"Cannot keep {num_clusters} clusters nonempty with {features.shape[0]} samples")
    memory = _unit_rows(features.astype(np.float32))
    chosen = [int(rng.integers(memory.shape[0]))]
    nearest = np.full(memory.shape[0], np.inf)
    for _ in range(1, num_clusters):
        diff = memory.astype(np.float64) - memory[chosen[-1]].astype(np.float64)
        nearest = np.minimum(nearest, np.sum(diff * diff, axis=1))
        chosen.append(int(np.argmax(nearest)))
    centroids = memory[chosen].copy()

    labels, _ = assign_pseudo_labels(memory, centroids)
    state = ClusterState(centroids=centroids, memory=memory, labels=labels,
                         cluster_sizes=np.bincount(labels, minlength=num_clusters),
                         confident=np.ones(memory.shape[0], dtype=bool))
    _recompute_centroids(state, range(num_clusters))
    handle_empty_clusters(state, rng)
    return state


def purity(cluster_labels: np.ndarray, truth: np.ndarray, mask: Optional[np.ndarray] = None,
           idle_label: Optional[int] = None) -> float:
    """
    Fraction of samples whose cluster maps to their true label under optimal one-to-one matching.

    Samples whose truth equals ``idle_label`` have no source to recover and are left out, so idle
    windows never claim a cluster of their own in the matching. Returns nan when nothing is left.
    """
    cluster_labels = np.asarray(cluster_labels)
    truth = np.asarray(truth)
    keep = np.ones(truth.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).copy()
    if idle_label is not None:
        keep &= truth != idle_label
    cluster_labels = cluster_labels[keep]
    truth = truth[keep]
    if cluster_labels.size == 0:
        return float("nan")
    clusters, cluster_idx = np.unique(cluster_labels, return_inverse=True)
    classes, class_idx = np.unique(truth, return_inverse=True)
    contingency = np.zeros((clusters.size, classes.size), dtype=np.int64)
    np.add.at(contingency, (cluster_idx, class_idx), 1)
    rows, cols = linear_sum_assignment(contingency, maximize=True)
    return float(contingency[rows, cols].sum() / cluster_labels.size)

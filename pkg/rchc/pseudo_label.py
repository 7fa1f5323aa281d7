# rchc/pseudo_label.py

"""Centroid pseudo-labels, the uncertainty ratio and the conflict set.

Pseudo-labels come from two passes of nearest-centroid assignment in
embedding space: softmax-weighted centroids first, then centroids rebuilt
from the provisional hard labels. The uncertainty ratio of a sample is its
nearest over second-nearest cosine distance to the refined centroids; a
sample whose hypothesis disagrees with its pseudo-label while its ratio is
below the threshold belongs to the conflict set.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .data import write_table
from .errors import ClusteringError, ContractError, StatisticsError

logger = logging.getLogger(__name__)

# --- Configuration ---

COSINE_EPS = 1e-12
CENTROID_EPS = 1e-8
DEFAULT_R_TH = 0.65
HISTOGRAM_BINS = 20

INITIAL = "initial"
REFINED = "refined"


@dataclass
class CentroidSet:
    centroids: np.ndarray  # [K, d]
    pass_: str
    degenerate: np.ndarray  # [K] bool, zero total weight

    @property
    def num_classes(self):
        return self.centroids.shape[0]


@dataclass
class PseudoLabelTable:
    sample_ids: np.ndarray
    pseudo_labels: np.ndarray
    ratios: np.ndarray
    epoch_stamp: int
    provisional_labels: np.ndarray

    def __len__(self):
        return self.pseudo_labels.shape[0]


@dataclass
class ThresholdStats:
    mean: float
    median: float
    counts: np.ndarray  # [HISTOGRAM_BINS]
    bin_edges: np.ndarray  # [HISTOGRAM_BINS + 1], edges at i / HISTOGRAM_BINS
    count: int


# --- Distances ---

def cosine_distance(u, v):
    """1 - u.v / (||u|| ||v|| + eps)."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ContractError(f"cosine distance between shapes {u.shape} and {v.shape}")
    return float(1.0 - np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v) + COSINE_EPS))


def cosine_distance_matrix(embeddings, centroids):
    """[n, K] cosine distances, same formula as cosine_distance."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if embeddings.ndim != 2 or centroids.ndim != 2 or embeddings.shape[1] != centroids.shape[1]:
        raise ContractError(f"embedding shape {embeddings.shape} does not match centroids {centroids.shape}")
    norms = np.outer(np.linalg.norm(embeddings, axis=1), np.linalg.norm(centroids, axis=1))
    return 1.0 - (embeddings @ centroids.T) / (norms + COSINE_EPS)


def _usable_distances(embeddings, centroids):
    if np.all(centroids.degenerate):
        raise ClusteringError("every class centroid is degenerate (zero total weight)")
    distances = cosine_distance_matrix(embeddings, centroids.centroids)
    distances[:, centroids.degenerate] = np.inf
    return distances


# --- Centroids and assignment ---

def weighted_centroids(embeddings, probs):
    """C_k = sum_i p_ik z_i / sum_i p_ik."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise ContractError("weighted_centroids needs at least one embedding")
    if probs.ndim != 2 or probs.shape[0] != embeddings.shape[0]:
        raise ContractError(f"probabilities {probs.shape} do not align with embeddings {embeddings.shape}")
    weights = probs.sum(axis=0)
    centroids = probs.T @ embeddings / (CENTROID_EPS + weights[:, None])
    return CentroidSet(centroids=centroids, pass_=INITIAL, degenerate=weights <= 0.0)


def assign_nearest(embeddings, centroids):
    """Index of the nearest non-degenerate centroid; ties go to the lowest class index."""
    return np.argmin(_usable_distances(embeddings, centroids), axis=1)


def uncertainty_ratios(embeddings, centroids):
    """Nearest over second-nearest cosine distance per sample, in [0, 1]."""
    distances = _usable_distances(embeddings, centroids)
    if np.count_nonzero(~centroids.degenerate) < 2:
        raise ClusteringError("the uncertainty ratio needs at least two usable centroids")
    distances = np.maximum(distances, 0.0)
    ordered = np.sort(distances, axis=1)
    nearest, second = ordered[:, 0], ordered[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(second > 0.0, nearest / second, 1.0)
    return np.clip(ratios, 0.0, 1.0)


def uncertainty_ratio(embedding, centroids):
    return float(uncertainty_ratios(np.asarray(embedding, dtype=np.float64)[None, :], centroids)[0])


def generate_pseudo_labels(embeddings, probs, epoch=0, sample_ids=None):
    """Two-pass centroid pseudo-labels.

    Returns (PseudoLabelTable, refined CentroidSet). Ratios are measured
    against the refined centroids.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    num_classes = probs.shape[1]

    initial = weighted_centroids(embeddings, probs)
    provisional = assign_nearest(embeddings, initial)

    hard = np.eye(num_classes)[provisional]
    counts = hard.sum(axis=0)
    refined_centroids = hard.T @ embeddings / (CENTROID_EPS + counts[:, None])
    empty = counts == 0
    if np.any(empty):
        logger.warning(f"Classes {np.flatnonzero(empty).tolist()} received no samples; keeping their initial centroids")
        refined_centroids[empty] = initial.centroids[empty]
    refined = CentroidSet(centroids=refined_centroids, pass_=REFINED, degenerate=initial.degenerate & empty)

    labels = assign_nearest(embeddings, refined)
    ratios = uncertainty_ratios(embeddings, refined)
    changed = int(np.count_nonzero(labels != provisional))
    logger.debug(f"Pseudo-labels epoch {epoch}: {changed} of {labels.size} changed by refinement")

    if sample_ids is None:
        sample_ids = np.arange(embeddings.shape[0])
    table = PseudoLabelTable(
        sample_ids=np.asarray(sample_ids, dtype=np.int64),
        pseudo_labels=labels,
        ratios=ratios,
        epoch_stamp=int(epoch),
        provisional_labels=provisional,
    )
    return table, refined


# --- Conflict set ---

def conflict_flags(pseudo_labels, hypotheses, ratios, r_th):
    """True where hypothesis != pseudo-label and ratio < r_th."""
    if not 0.0 <= r_th <= 1.0:
        raise ContractError(f"r_th must lie in [0, 1], got {r_th}")
    pseudo_labels, hypotheses, ratios = (np.asarray(a) for a in (pseudo_labels, hypotheses, ratios))
    if not pseudo_labels.shape == hypotheses.shape == ratios.shape:
        raise ContractError("pseudo-labels, hypotheses and ratios must be aligned")
    return (pseudo_labels != hypotheses) & (ratios < r_th)


def threshold_stats(ratios, conflict_free_mask):
    """Mean, median and a 20-bin histogram over [0, 1] of the selected ratios."""
    ratios = np.asarray(ratios, dtype=np.float64)
    mask = np.asarray(conflict_free_mask, dtype=bool)
    if ratios.shape != mask.shape:
        raise ContractError("ratios and mask must be aligned")
    selected = ratios[mask]
    if selected.size == 0:
        raise StatisticsError(
            "no non-conflict samples to summarize",
            hint="Every sample's hypothesis disagrees with its pseudo-label; check the checkpoint matches the data.",
        )
    counts, edges = np.histogram(selected, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    return ThresholdStats(
        mean=float(selected.mean()),
        median=float(np.median(selected)),
        counts=counts,
        bin_edges=edges,
        count=int(selected.size),
    )


# --- Exports ---

def write_pseudo_label_table(table, flags, path):
    """sample_id, pseudo_label, ratio, conflict_flag, epoch."""
    flags = np.asarray(flags, dtype=np.int64)
    rows = np.column_stack([
        table.sample_ids,
        table.pseudo_labels,
        table.ratios,
        flags,
        np.full(len(table), table.epoch_stamp),
    ])
    write_table(path, rows, "sample_id,pseudo_label,ratio,conflict_flag,epoch", ["%d", "%d", "%.9g", "%d", "%d"])


def write_histogram(stats, path):
    """bin_start, bin_end, count."""
    rows = np.column_stack([stats.bin_edges[:-1], stats.bin_edges[1:], stats.counts])
    write_table(path, rows, "bin_start,bin_end,count", ["%.9g", "%.9g", "%d"])


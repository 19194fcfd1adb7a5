# aogdet/services/clustering.py
# ISODATA over HOG patch descriptors, size bucketing, the cross-class
# similarity matrix and class grouping.

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from aogdet.errors import ConfigError, DimensionMismatch, InsufficientData
from aogdet.services.imaging import PartShape, Placement
from aogdet.utils.math_utils import median_pairwise_distance, principal_spread, resample_grid

logger = logging.getLogger(__name__)


# --- 1. Types ---

@dataclass
class Patch:
    sample: int
    class_label: str
    part_slot: int
    descriptor: np.ndarray
    shape: PartShape
    # provenance inside a model (filled by structure learning)
    leaf: Optional[int] = None
    and_node: Optional[int] = None
    placement: Optional[Placement] = None

    def __post_init__(self):
        if self.descriptor.size % (self.shape.rows * self.shape.cols):
            raise DimensionMismatch(f"Descriptor of length {self.descriptor.size} does not fit shape {self.shape}")


@dataclass(frozen=True)
class IsodataConfig:
    initial_k: int = 1
    min_cluster_size: int = 5
    # None: derived from the median pairwise distance of the input
    split_stddev: Optional[float] = None
    merge_distance: Optional[float] = None
    max_iterations: int = 50
    split_factor: float = 0.6
    merge_factor: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.initial_k < 1 or self.min_cluster_size < 1 or self.max_iterations < 1:
            raise ConfigError("initial_k, min_cluster_size and max_iterations must be positive")
        for name in ('split_stddev', 'merge_distance'):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class IsodataResult:
    assignment: np.ndarray
    centroids: np.ndarray
    # per round: (objective after the centroid update, preceded by a structural change?)
    history: List[tuple] = field(default_factory=list)
    split_stddev: float = 0.0
    merge_distance: float = 0.0

    @property
    def k(self):
        return len(self.centroids)

    def members(self, cluster):
        return np.flatnonzero(self.assignment == cluster)


@dataclass
class SizeBucket:
    shape: PartShape
    patches: List[Patch]
    # descriptors resampled to `shape`, one row per patch
    descriptors: np.ndarray


@dataclass
class SimilarityMatrix:
    counts: np.ndarray
    labels: List[str]

    @property
    def sigma(self):
        return len(self.labels) / 3.0


# --- 2. ISODATA ---

def _as_matrix(points):
    if isinstance(points, np.ndarray) and points.ndim == 2:
        return points.astype(np.float64, copy=False)
    rows = [np.asarray(p, dtype=np.float64).ravel() for p in points]
    if not rows:
        return np.zeros((0, 0))
    if len({row.size for row in rows}) != 1:
        raise DimensionMismatch("ISODATA points must share one dimension")
    return np.vstack(rows)


def _assign(X, centroids):
    d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def _update(X, assignment, k):
    return np.vstack([X[assignment == j].mean(axis=0) for j in range(k)])


def _objective(X, centroids, assignment):
    return float(((X - centroids[assignment]) ** 2).sum())


def _discard_small(X, centroids, assignment, min_size):
    """Drops clusters below min_size and reassigns their members; all-small collapses to one."""
    sizes = np.bincount(assignment, minlength=len(centroids))
    keep = sizes >= min_size
    if keep.all():
        return centroids, assignment, False
    if not keep.any():
        return X.mean(axis=0, keepdims=True), np.zeros(len(X), dtype=np.int64), True
    centroids = centroids[keep]
    return centroids, _assign(X, centroids), True


def _split(X, centroids, assignment, threshold):
    """
    Splits every cluster whose standard deviation along some coordinate axis
    exceeds threshold. The two new centroids sit one widest-axis deviation
    away from the old one, along the cluster's principal direction.
    Undersized halves are left to the next discard step.
    """
    out, changed = [], False
    for j, centroid in enumerate(centroids):
        members = X[assignment == j]
        if len(members) >= 2:
            deviation = members.std(axis=0)
            widest = int(np.argmax(deviation))
            if deviation[widest] > threshold:
                _, direction = principal_spread(members)
                if not np.any(direction):
                    direction = np.eye(X.shape[1])[widest]
                offset = deviation[widest] * direction
                out.extend([centroid + offset, centroid - offset])
                changed = True
                continue
        out.append(centroid)
    return np.vstack(out), changed


def _merge(X, centroids, assignment, threshold):
    """Merges centroid pairs closer than threshold, closest first, each cluster at most once."""
    k = len(centroids)
    if k < 2:
        return centroids, False
    sizes = np.bincount(assignment, minlength=k).astype(np.float64)
    pairs = []
    for a in range(k):
        for b in range(a + 1, k):
            distance = float(np.linalg.norm(centroids[a] - centroids[b]))
            if distance < threshold:
                pairs.append((distance, a, b))
    if not pairs:
        return centroids, False
    used, merged = set(), []
    for _, a, b in sorted(pairs):
        if a in used or b in used:
            continue
        used.update((a, b))
        total = sizes[a] + sizes[b]
        merged.append((centroids[a] * sizes[a] + centroids[b] * sizes[b]) / max(total, 1.0))
    out = [centroids[j] for j in range(k) if j not in used] + merged
    return np.vstack(out), True


def isodata(points, config=None, initial_centroids=None):
    """
    ISODATA clustering with Euclidean distance.

    Rounds of k-means assignment/update, then discarding of clusters below
    min_cluster_size (members reassigned), splitting of clusters whose
    standard deviation along any axis exceeds split_stddev, or else merging
    of centroids closer than merge_distance.
    Stops when a round changes neither structure nor assignment.

    Raises:
        DimensionMismatch: points of different lengths
        InsufficientData: no points
    """
    config = config or IsodataConfig()
    X = _as_matrix(points)
    if len(X) == 0:
        raise InsufficientData("ISODATA needs at least one point")

    scale = median_pairwise_distance(X) if len(X) <= 2000 else median_pairwise_distance(X[:2000])
    split = config.split_stddev if config.split_stddev is not None else config.split_factor * scale
    merge = config.merge_distance if config.merge_distance is not None else config.merge_factor * scale

    if initial_centroids is not None:
        centroids = np.atleast_2d(np.asarray(initial_centroids, dtype=np.float64))
        if centroids.shape[1] != X.shape[1]:
            raise DimensionMismatch("Initial centroids do not match the point dimension")
    else:
        rng = np.random.default_rng(config.seed)
        k = min(config.initial_k, len(X))
        centroids = X[np.sort(rng.choice(len(X), size=k, replace=False))]

    history = []
    assignment = None
    structural = True
    for iteration in range(config.max_iterations):
        previous = assignment
        assignment = _assign(X, centroids)
        centroids, assignment, discarded = _discard_small(X, centroids, assignment, config.min_cluster_size)
        centroids = _update(X, assignment, len(centroids))
        history.append((_objective(X, centroids, assignment), structural or discarded))

        if split > 0 and iteration < config.max_iterations - 1:
            centroids, changed = _split(X, centroids, assignment, split)
        else:
            changed = False
        if not changed:
            centroids, changed = _merge(X, centroids, assignment, merge)
        structural = changed
        if not changed and not discarded and previous is not None and np.array_equal(previous, assignment):
            break

    assignment = _assign(X, centroids)
    centroids, assignment, _ = _discard_small(X, centroids, assignment, config.min_cluster_size)
    centroids = _update(X, assignment, len(centroids))
    logger.debug(f"ISODATA: {len(X)} points -> {len(centroids)} clusters in {len(history)} rounds")
    return IsodataResult(assignment=assignment, centroids=centroids, history=history,
                         split_stddev=split, merge_distance=merge)


# --- 3. Size buckets ---

def _within_ratio(a, b, ratio):
    return (max(a.rows, b.rows) / min(a.rows, b.rows) <= ratio
            and max(a.cols, b.cols) / min(a.cols, b.cols) <= ratio)


def bucket_by_size(patches, ratio=1.25):
    """
    Groups patches so that within a bucket every pair of shapes differs by at
    most `ratio` per axis; descriptors are resampled to the bucket's modal shape
    (most common, smallest on ties).
    """
    shapes = sorted({p.shape for p in patches}, key=lambda s: (s.rows * s.cols, s.rows, s.cols))
    groups: List[List[PartShape]] = []
    for shape in shapes:
        for group in groups:
            if all(_within_ratio(shape, other, ratio) for other in group):
                group.append(shape)
                break
        else:
            groups.append([shape])

    buckets = []
    for group in groups:
        members = [p for p in patches if p.shape in group]
        counts = Counter(p.shape for p in members)
        modal = min(counts, key=lambda s: (-counts[s], s.rows * s.cols, s.rows, s.cols))
        descriptors = np.vstack([resample_descriptor(p.descriptor, p.shape, modal) for p in members])
        buckets.append(SizeBucket(shape=modal, patches=members, descriptors=descriptors))
    return buckets


def resample_descriptor(descriptor, shape, target):
    """Bilinear resampling of a flattened cell-descriptor window to another shape."""
    if shape == target:
        return np.asarray(descriptor, dtype=np.float64).copy()
    grid = np.asarray(descriptor, dtype=np.float64).reshape(shape.rows, shape.cols, -1)
    return resample_grid(grid, (target.rows, target.cols)).ravel()


# --- 4. Similarity and grouping ---

def build_similarity(patches, labels, isodata_config=None, size_ratio=1.25):
    """
    Counts, for every pair of classes, the clusters that mix their patches.

    Patches are bucketed by size and clustered per bucket; each cluster that
    holds patches of classes j != k increments M[j, k] and M[k, j] once.
    """
    isodata_config = isodata_config or IsodataConfig()
    index = {label: i for i, label in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)

    for bucket in bucket_by_size(patches, size_ratio):
        config = isodata_config
        if isodata_config.initial_k == 1:
            # start near the expected number of appearance modes
            k = max(1, len(bucket.patches) // (4 * isodata_config.min_cluster_size))
            config = replace(isodata_config, initial_k=k)
        result = isodata(bucket.descriptors, config)
        for cluster in range(result.k):
            present = sorted({index[bucket.patches[i].class_label] for i in result.members(cluster)})
            for a in range(len(present)):
                for b in range(a + 1, len(present)):
                    counts[present[a], present[b]] += 1
                    counts[present[b], present[a]] += 1
        logger.debug(f"Bucket {bucket.shape.rows}x{bucket.shape.cols}: {len(bucket.patches)} patches, "
                     f"{result.k} clusters")
    return SimilarityMatrix(counts=counts, labels=list(labels))


def partition_groups(similarity, sigma=None):
    """
    Connected components of the class graph with an edge wherever
    M[j, k] > sigma (default M/3), ordered by their smallest class index.

    Returns:
        list of groups, each a sorted list of class indices
    """
    sigma = similarity.sigma if sigma is None else sigma
    n = len(similarity.labels)
    if n == 0:
        return []
    adjacency = np.asarray(similarity.counts) > sigma
    np.fill_diagonal(adjacency, False)
    _, component = connected_components(csr_matrix(adjacency), directed=False)
    groups = {}
    for index, label in enumerate(component):
        groups.setdefault(label, []).append(index)
    return sorted(groups.values(), key=lambda members: members[0])

"""k-means baselines over covariate columns, and the exploratory splitting rule."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from core.model import mean_taxicab_distances
from core.regression import median_member
from evaluation.metrics import tau
from shared.errors import ConfigError
from shared.models import AllocationState
from shared.random_streams import substream

logger = logging.getLogger(__name__)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    history: List[float] = field(default_factory=list)


@dataclass
class KMeansBaseline:
    labels: np.ndarray
    inertia: float
    tau: Optional[float] = None
    representatives: Optional[List[int]] = None


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (points ** 2).sum(axis=1)[:, None] - 2.0 * points @ centers.T + (centers ** 2).sum(axis=1)[None, :]
    return np.maximum(d2, 0.0)


def kmeans_plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(m)]
    closest = _squared_distances(points, centers[:1]).ravel()
    for i in range(1, k):
        total = closest.sum()
        idx = rng.integers(m) if total <= 0 else int(rng.choice(m, p=closest / total))
        centers[i] = points[idx]
        closest = np.minimum(closest, _squared_distances(points, centers[i : i + 1]).ravel())
    return centers


def lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int = 300) -> KMeansResult:
    centers = centers.copy()
    labels = None
    history: List[float] = []
    for _ in range(max_iter):
        d2 = _squared_distances(points, centers)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(points.shape[0]), new_labels].sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        point_cost = d2[np.arange(points.shape[0]), labels]
        for j in range(centers.shape[0]):
            mask = labels == j
            if mask.any():
                centers[j] = points[mask].mean(axis=0)
            else:
                far = int(point_cost.argmax())
                centers[j] = points[far]
                point_cost[far] = 0.0
    return KMeansResult(labels=labels, centers=centers, inertia=history[-1], history=history)


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, restarts: int = 20, max_iter: int = 300) -> KMeansResult:
    """Best of several k-means++ seeded Lloyd runs."""
    points = np.asarray(points, dtype=np.float64)
    if k < 1 or k > points.shape[0]:
        raise ConfigError(f"k={k} outside 1..{points.shape[0]}")
    best: Optional[KMeansResult] = None
    for _ in range(restarts):
        result = lloyd(points, kmeans_plusplus_init(points, k, rng), max_iter=max_iter)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def kmeans_baseline(
    bits,
    q_target: int,
    seed: int = 0,
    restarts: int = 20,
    mode: str = "clustering",
    true_labels: Optional[Sequence[int]] = None,
) -> KMeansBaseline:
    """Cluster the columns of X with k-means; score tau or extract median representatives."""
    if q_target < 1:
        raise ConfigError("q_target must be at least 1")
    x = np.asarray(bits, dtype=np.float64)
    rng = substream(seed, "kmeans", purpose=mode)
    result = kmeans(x.T, q_target, rng, restarts=restarts)
    labels = AllocationState.from_labels(result.labels).as_array()
    baseline = KMeansBaseline(labels=labels, inertia=result.inertia)
    if mode == "clustering":
        if true_labels is not None:
            baseline.tau = tau([labels], true_labels)
    elif mode == "regression":
        baseline.representatives = [median_member(x, np.flatnonzero(labels == k)) for k in range(labels.max() + 1)]
    else:
        raise ConfigError(f"unknown k-means baseline mode {mode!r}")
    return baseline


def kmeans_sweep(bits, ks: Sequence[int], seed: int = 0, restarts: int = 20) -> List[KMeansBaseline]:
    return [kmeans_baseline(bits, k, seed=seed, restarts=restarts) for k in ks]


def median_within_distance(dist: np.ndarray, members: np.ndarray) -> float:
    if members.size < 2:
        return 0.0
    block = dist[np.ix_(members, members)]
    rows, cols = np.triu_indices(members.size, k=1)
    return float(np.median(block[rows, cols]))


def eda_split_clusters(
    bits,
    threshold: float = 0.4,
    seed: int = 0,
    restarts: int = 5,
    max_clusters: Optional[int] = None,
) -> np.ndarray:
    """Split the loosest cluster in two with k-means until every median within-cluster distance is below threshold."""
    x = np.asarray(bits, dtype=np.float64)
    p = x.shape[1]
    max_clusters = max_clusters or p
    dist = mean_taxicab_distances(x)
    rng = substream(seed, "eda", purpose="split")
    labels = np.zeros(p, dtype=np.int64)
    while labels.max() + 1 < max_clusters:
        spreads = [median_within_distance(dist, np.flatnonzero(labels == k)) for k in range(labels.max() + 1)]
        worst = int(np.argmax(spreads))
        if spreads[worst] < threshold:
            break
        members = np.flatnonzero(labels == worst)
        halves = kmeans(x[:, members].T, 2, rng, restarts=restarts).labels
        if halves.min() == halves.max():
            logger.warning("Cluster %d could not be split further", worst)
            break
        labels[members[halves == 1]] = labels.max() + 1
    logger.info("EDA splitting produced %d clusters", labels.max() + 1)
    return AllocationState.from_labels(labels).as_array()

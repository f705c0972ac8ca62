"""Compatibility scores, neighbor mining and neighbor-consistency statistics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .errors import EmptyBucket, InsufficientCorrespondences, ProjectionAtInfinity

DEFAULT_LAMBDA = 1e-3
DEFAULT_K = 8
MAX_N = 4000
SCORE_FLOOR = 1e-300

BUCKETS = ("<20%", "20-35%", "35-50%", ">50%")
STATS_KS = (4, 8, 16, 32)
SWEEP_THRESHOLDS = tuple(round(5.0 + 0.1 * i, 1) for i in range(30))  # 5.0 .. 7.9


class ScoreFlagWarning(UserWarning):
    """A pair score fell back to the floor value because projection failed."""


@dataclass(frozen=True)
class ScoreMatrix:
    """Pairwise compatibility scores of one correspondence set.

    ``errors`` holds the symmetric reprojection-error sums the scores were
    built from; mining ranks on them directly so that rounding inside ``exp``
    can never merge two distinct candidates.  ``keys`` are the ``(x, y, xp, yp)``
    coordinates used for the final tie-break.  Both are optional so a matrix
    can be built from raw scores.
    """

    scores: np.ndarray
    lam: float
    errors: np.ndarray | None = None
    keys: np.ndarray | None = None

    def __len__(self):
        return len(self.scores)


@dataclass(frozen=True)
class NeighborGraph:
    """Per-query ordered neighbor lists (``(N, k)`` indices and scores)."""

    indices: np.ndarray
    scores: np.ndarray
    include_self: bool = True

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self):
        return len(self.indices)

    def truncate(self, k: int) -> "NeighborGraph":
        """Top-``k`` prefix; mining once at the largest ``k`` serves every smaller one."""
        if not 1 <= k <= self.k:
            raise InsufficientCorrespondences(f"cannot truncate a width-{self.k} graph to k={k}")
        return NeighborGraph(self.indices[:, :k], self.scores[:, :k], self.include_self)


def pair_score(c_i: geom.Correspondence, c_j: geom.Correspondence, lam: float = DEFAULT_LAMBDA) -> float:
    """Gaussian-kernel compatibility ``exp(-lam * (e_j(c_i) + e_i(c_j)))``."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    try:
        err = geom.reprojection_error(c_i, c_j) + geom.reprojection_error(c_j, c_i)
    except ProjectionAtInfinity:
        warnings.warn("projection at infinity; score set to floor", ScoreFlagWarning, stacklevel=2)
        return SCORE_FLOOR
    return max(float(np.exp(-lam * err)), SCORE_FLOOR)


def score_matrix(corrs, lam: float = DEFAULT_LAMBDA, max_n: int = MAX_N) -> ScoreMatrix:
    arr = geom.as_array(corrs)
    n = len(arr)
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if n < 2:
        raise InsufficientCorrespondences(f"need at least 2 correspondences, got {n}")
    if n > max_n:
        raise ValueError(f"set size {n} exceeds the cap of {max_n}")
    e = geom.reprojection_error_matrix(arr)
    iu, ju = np.triu_indices(n, k=1)
    upper = e[iu, ju] + e[ju, iu]
    errors = np.zeros((n, n))
    errors[iu, ju] = upper
    errors[ju, iu] = upper
    s = np.maximum(np.exp(-lam * upper), SCORE_FLOOR)
    scores = np.ones((n, n))
    scores[iu, ju] = s
    scores[ju, iu] = s
    keys = arr[:, [0, 1, 6, 7]].copy()
    return ScoreMatrix(scores, lam, errors, keys)


def _global_order(total: np.ndarray, keys: np.ndarray | None) -> np.ndarray:
    """Rank of every node under (total asc, keys lexicographic asc).

    Both keys depend only on a node's own data, so the rank is a
    permutation-independent tie-breaker.
    """
    cols = [] if keys is None else [keys[:, c] for c in range(keys.shape[1] - 1, -1, -1)]
    order = np.lexsort((*cols, total))
    rank = np.empty(len(total), dtype=np.int64)
    rank[order] = np.arange(len(total))
    return rank


def _order_independent_rowsum(m: np.ndarray) -> np.ndarray:
    # sorting first makes the float sum independent of the node order
    return np.sort(m, axis=1).sum(axis=1)


def _mine(dissim: np.ndarray, tiebreak: np.ndarray, k: int, include_self: bool) -> np.ndarray:
    n = len(dissim)
    if k < 1:
        raise ValueError("k must be at least 1")
    limit = n if include_self else n - 1
    if k > limit:
        raise InsufficientCorrespondences(f"k={k} exceeds the {limit} available neighbors (N={n})")
    d = np.array(dissim, dtype=float, copy=True)
    np.fill_diagonal(d, -np.inf if include_self else np.inf)
    tb = np.broadcast_to(tiebreak, d.shape)
    order = np.lexsort((tb, d), axis=1)
    return order[:, :k]


def mine_cs_knn(matrix: ScoreMatrix, k: int = DEFAULT_K, include_self: bool = True) -> NeighborGraph:
    """Top-``k`` most compatible correspondences of every query.

    With ``include_self`` the query occupies position 0 and ``k - 1`` others
    follow; otherwise all ``k`` slots hold other correspondences.
    """
    scores = np.asarray(matrix.scores, dtype=float)
    dissim = matrix.errors if matrix.errors is not None else -scores
    total = _order_independent_rowsum(dissim if matrix.errors is not None else 1.0 - scores)
    idx = _mine(dissim, _global_order(total, matrix.keys), k, include_self)
    return NeighborGraph(idx, np.take_along_axis(scores, idx, axis=1), include_self)


def pairwise_distances_4d(corrs) -> np.ndarray:
    """Euclidean distances between ``(x, y, xp, yp)`` vectors, computed pairwise."""
    arr = geom.as_array(corrs)
    p = arr[:, [0, 1, 6, 7]]
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt(np.einsum("ijc,ijc->ij", diff, diff))


def mine_spatial_knn(corrs, k: int = DEFAULT_K, include_self: bool = True) -> NeighborGraph:
    """Nearest neighbors in the 4D space of both keypoints.

    Graph scores are ``exp(-distance)``, so they share the (0, 1] range and the
    non-increasing order of compatibility graphs.
    """
    arr = geom.as_array(corrs)
    if len(arr) > MAX_N:
        raise ValueError(f"set size {len(arr)} exceeds the cap of {MAX_N}")
    dist = pairwise_distances_4d(arr)
    keys = arr[:, [0, 1, 6, 7]]
    idx = _mine(dist, _global_order(_order_independent_rowsum(dist), keys), k, include_self)
    return NeighborGraph(idx, np.exp(-np.take_along_axis(dist, idx, axis=1)), include_self)


# ---------------------------------------------------------------------------
# Neighbor consistency statistics
# ---------------------------------------------------------------------------


def neighbor_inlier_ratio(graph: NeighborGraph, labels) -> float:
    """Mean fraction of inliers among the neighbors of inliers (self excluded)."""
    labels = np.asarray(labels).astype(bool)
    if len(labels) != len(graph):
        raise ValueError("graph and labels cover different sets")
    if not labels.any():
        raise EmptyBucket("set contains no inliers")
    nbrs = graph.indices[:, 1:] if graph.include_self else graph.indices
    if nbrs.shape[1] == 0:
        raise ValueError("graph has no neighbors besides the query itself")
    per_query = labels[nbrs].mean(axis=1)
    return float(per_query[labels].mean())


def inlier_ratio_bucket(ratio: float) -> str:
    if ratio < 0.20:
        return BUCKETS[0]
    if ratio < 0.35:
        return BUCKETS[1]
    if ratio <= 0.50:
        return BUCKETS[2]
    return BUCKETS[3]


@dataclass
class NeighborStats:
    """Per (miner, bucket, k): running sum and count of per-scene ratios."""

    ks: tuple = STATS_KS
    sums: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def add(self, miner: str, bucket: str, k: int, value: float):
        key = (miner, bucket, k)
        self.sums[key] = self.sums.get(key, 0.0) + value
        self.counts[key] = self.counts.get(key, 0) + 1

    def mean(self, miner: str, bucket: str, k: int) -> float:
        key = (miner, bucket, k)
        if not self.counts.get(key):
            raise EmptyBucket(f"no scenes for {miner} / {bucket} / k={k}")
        return self.sums[key] / self.counts[key]

    def count(self, bucket: str) -> int:
        return max((c for (m, b, _), c in self.counts.items() if b == bucket), default=0)

    def table(self) -> str:
        lines = [f"{'bucket':>8} {'k':>3} {'scenes':>6} {'CS':>7} {'SP':>7}"]
        for bucket in BUCKETS:
            for k in self.ks:
                n = self.counts.get(("cs", bucket, k), 0)
                if n == 0:
                    lines.append(f"{bucket:>8} {k:>3} {0:>6} {'n/a':>7} {'n/a':>7}")
                    continue
                cs, sp = self.mean("cs", bucket, k), self.mean("sp", bucket, k)
                lines.append(f"{bucket:>8} {k:>3} {n:>6} {cs:>7.4f} {sp:>7.4f}")
        return "\n".join(lines)


def scene_neighbor_ratios(corrs, labels, ks=STATS_KS, lam: float = DEFAULT_LAMBDA) -> dict:
    """``{(miner, k): ratio}`` for one scene, mining once at ``max(ks)``."""
    kmax = max(ks)
    cs = mine_cs_knn(score_matrix(corrs, lam), kmax, include_self=False)
    sp = mine_spatial_knn(corrs, kmax, include_self=False)
    out = {}
    for k in ks:
        out[("cs", k)] = neighbor_inlier_ratio(cs.truncate(k), labels)
        out[("sp", k)] = neighbor_inlier_ratio(sp.truncate(k), labels)
    return out


def neighbor_inlier_stats(scenes, ks=STATS_KS, lam: float = DEFAULT_LAMBDA, stats: NeighborStats | None = None):
    """Bucketed neighbor inlier ratios of both miners over ``(corrs, labels)`` pairs.

    Scenes without inliers are skipped.
    """
    stats = stats if stats is not None else NeighborStats(tuple(ks))
    for corrs, labels in scenes:
        labels = np.asarray(labels)
        if not labels.any():
            continue
        bucket = inlier_ratio_bucket(labels.mean())
        for (miner, k), value in scene_neighbor_ratios(corrs, labels, ks, lam).items():
            stats.add(miner, bucket, k, value)
    return stats


# ---------------------------------------------------------------------------
# Hand-crafted score-sum classifier
# ---------------------------------------------------------------------------


def graph_score_sums(graph: NeighborGraph, matrix: ScoreMatrix) -> np.ndarray:
    rows = np.arange(len(graph))[:, None]
    return np.asarray(matrix.scores)[rows, graph.indices].sum(axis=1)


def score_sum_classifier(graph: NeighborGraph, matrix: ScoreMatrix, threshold: float) -> np.ndarray:
    """Label 1 where the summed graph scores exceed ``threshold``."""
    if not 0 < threshold <= graph.k:
        raise ValueError(f"threshold must lie in (0, {graph.k}]")
    return (graph_score_sums(graph, matrix) > threshold).astype(np.int64)


def score_sum_sweep(graph: NeighborGraph, matrix: ScoreMatrix, thresholds=SWEEP_THRESHOLDS) -> dict:
    sums = graph_score_sums(graph, matrix)
    return {t: (sums > t).astype(np.int64) for t in thresholds}

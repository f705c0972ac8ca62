"""Normalized eight-point essential matrix estimation and RANSAC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom
from .errors import DegenerateConfiguration, InsufficientCorrespondences, NoConsensus

SAMPLE_SIZE = 8
RANK_TOL = 1e-10


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 2000
    sample_size: int = SAMPLE_SIZE
    inlier_threshold: float = geom.LABEL_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if self.sample_size < SAMPLE_SIZE:
            raise ValueError("the eight-point solver needs samples of at least 8")


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(pts - c, axis=1))
    if not mean_dist > 1e-12:
        raise DegenerateConfiguration("points are coincident")
    s = np.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def eight_point(corrs) -> np.ndarray:
    """Essential matrix from >= 8 matches (Hartley-normalized linear solve).

    The linear estimate is projected onto the essential manifold (two equal
    singular values, one zero) and scaled to unit Frobenius norm.
    """
    arr = geom.as_array(corrs)
    n = len(arr)
    if n < SAMPLE_SIZE:
        raise InsufficientCorrespondences(f"eight-point needs 8 matches, got {n}")
    x1, x2 = arr[:, 0:2], arr[:, 6:8]
    t1, t2 = _normalizer(x1), _normalizer(x2)
    p1 = np.c_[x1, np.ones(n)] @ t1.T
    p2 = np.c_[x2, np.ones(n)] @ t2.T
    # row i: kron(x2_i, x1_i) so that vec(E) . row = x2^T E x1
    design = (p2[:, :, None] * p1[:, None, :]).reshape(n, 9)
    _, s, vt = np.linalg.svd(design, full_matrices=True)
    if s[SAMPLE_SIZE - 1] <= RANK_TOL * s[0]:
        raise DegenerateConfiguration("design matrix has rank below 8")
    e = vt[-1].reshape(3, 3)
    e = t2.T @ e @ t1
    return geom.project_to_essential(e)


def _distances(e, arr):
    return geom.symmetric_epipolar_distances(e, arr)


def msac_cost(distances, threshold: float) -> float:
    """Truncated distance sum: inliers pay their distance, outliers the threshold."""
    return float(np.minimum(distances, threshold).sum())


def ransac(corrs, config: RansacConfig = RansacConfig()):
    """Robust essential matrix and inlier labels.

    Hypotheses from random minimal samples are ranked by :func:`msac_cost`
    (ties: more inliers).  Plain inlier counting can prefer a slightly wrong
    model that also sweeps in a few near-threshold outliers; the truncated
    cost charges every inlier its distance and so favours the tight fit.  The
    winner is re-fit once on its consensus set, kept if the cost does not
    grow.  Returns ``(E, labels)``.
    """
    arr = geom.as_array(corrs)
    n = len(arr)
    if n < config.sample_size:
        raise InsufficientCorrespondences(f"RANSAC needs {config.sample_size} matches, got {n}")
    rng = np.random.default_rng(config.seed)
    thr = config.inlier_threshold
    best = None  # (cost, -count), e, mask
    for _ in range(config.iterations):
        sample = rng.choice(n, size=config.sample_size, replace=False)
        try:
            e = eight_point(arr[sample])
        except DegenerateConfiguration:
            continue
        d = _distances(e, arr)
        mask = d < thr
        key = (msac_cost(d, thr), -int(mask.sum()))
        if best is None or key < best[0]:
            best = (key, e, mask)
    if best is None or best[2].sum() < SAMPLE_SIZE:
        raise NoConsensus("no hypothesis reached 8 inliers")
    key, e, mask = best
    try:
        refit = eight_point(arr[mask])
        d = _distances(refit, arr)
        refit_mask = d < thr
        if refit_mask.sum() >= SAMPLE_SIZE and (msac_cost(d, thr), -int(refit_mask.sum())) <= key:
            e, mask = refit, refit_mask
    except DegenerateConfiguration:
        pass
    return e, mask.astype(np.int64)

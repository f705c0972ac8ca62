"""Two-view geometry on camera-normalized coordinates.

A correspondence set is stored as an ``(N, 12)`` float array whose columns are
``x, y, a11, a12, a21, a22, xp, yp, b11, b12, b21, b22``: the keypoint and the
2x2 affine frame in the first image followed by the same in the second image.
The scalar helpers (:func:`frame_matrix`, :func:`local_transform`, ...) work on
single :class:`Correspondence` objects; the plural and ``*_matrix`` variants are
their vectorized counterparts used by the mining and training code.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import DegenerateEpipolar, DegenerateFrame, ProjectionAtInfinity

DET_EPS = 1e-9
DEPTH_EPS = 1e-12
LINE_EPS = 1e-12
LABEL_THRESHOLD = 1e-4

KP = slice(0, 2)
FRAME = slice(2, 6)
KP_PRIME = slice(6, 8)
FRAME_PRIME = slice(8, 12)


class Point2(NamedTuple):
    x: float
    y: float


class AffineFrame(NamedTuple):
    a11: float
    a12: float
    a21: float
    a22: float

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]], dtype=float)

    @classmethod
    def from_matrix(cls, m) -> "AffineFrame":
        m = np.asarray(m, dtype=float)
        return cls(float(m[0, 0]), float(m[0, 1]), float(m[1, 0]), float(m[1, 1]))


class Correspondence(NamedTuple):
    kp: Point2
    frame: AffineFrame
    kp_prime: Point2
    frame_prime: AffineFrame

    def row(self) -> np.ndarray:
        return np.array([*self.kp, *self.frame, *self.kp_prime, *self.frame_prime], dtype=float)

    @classmethod
    def from_row(cls, row) -> "Correspondence":
        r = [float(v) for v in row]
        return cls(Point2(*r[0:2]), AffineFrame(*r[2:6]), Point2(*r[6:8]), AffineFrame(*r[8:12]))

    @classmethod
    def make(cls, kp, frame, kp_prime, frame_prime) -> "Correspondence":
        """Build from loose arrays: points as pairs, frames as 2x2 matrices."""
        return cls(
            Point2(*map(float, kp)),
            AffineFrame.from_matrix(frame),
            Point2(*map(float, kp_prime)),
            AffineFrame.from_matrix(frame_prime),
        )


def as_array(corrs) -> np.ndarray:
    """Coerce a list of correspondences (or an array) to the ``(N, 12)`` layout."""
    if isinstance(corrs, np.ndarray):
        arr = np.asarray(corrs, dtype=float)
    else:
        corrs = list(corrs)
        if not corrs:
            return np.zeros((0, 12))
        arr = np.stack([c.row() if isinstance(c, Correspondence) else np.asarray(c, float) for c in corrs])
    if arr.ndim != 2 or arr.shape[1] != 12:
        raise ValueError(f"expected an (N, 12) correspondence array, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Frames and local transforms
# ---------------------------------------------------------------------------


def frame_matrix(frame: AffineFrame, kp: Point2) -> np.ndarray:
    """Homogeneous 3x3 matrix ``[[A, k], [0, 1]]`` of a keypoint and its frame."""
    a = frame.matrix
    if abs(np.linalg.det(a)) <= DET_EPS:
        raise DegenerateFrame(f"frame determinant {np.linalg.det(a):.3g} too small")
    t = np.eye(3)
    t[:2, :2] = a
    t[:2, 2] = kp
    return t


def local_transform(c: Correspondence) -> np.ndarray:
    """Affine map taking the first local structure to the second, ``T' T^-1``."""
    t = frame_matrix(c.frame, c.kp)
    tp = frame_matrix(c.frame_prime, c.kp_prime)
    h = tp @ np.linalg.inv(t)
    h[2] = (0.0, 0.0, 1.0)
    return h


def local_transforms(corrs) -> np.ndarray:
    """Vectorized :func:`local_transform`; returns ``(N, 3, 3)``.

    The inverse of ``[[A, k], [0, 1]]`` is ``[[A^-1, -A^-1 k], [0, 1]]``, so the
    product reduces to ``[[A' A^-1, k' - A' A^-1 k], [0, 1]]``.
    """
    arr = as_array(corrs)
    n = len(arr)
    a = arr[:, FRAME].reshape(n, 2, 2)
    ap = arr[:, FRAME_PRIME].reshape(n, 2, 2)
    det = np.linalg.det(a) if n else np.zeros(0)
    detp = np.linalg.det(ap) if n else np.zeros(0)
    bad = (np.abs(det) <= DET_EPS) | (np.abs(detp) <= DET_EPS)
    if np.any(bad):
        raise DegenerateFrame(f"{int(bad.sum())} degenerate frame(s), first at index {int(np.argmax(bad))}")
    lin = ap @ np.linalg.inv(a)
    h = np.zeros((n, 3, 3))
    h[:, :2, :2] = lin
    h[:, :2, 2] = arr[:, KP_PRIME] - np.einsum("nij,nj->ni", lin, arr[:, KP])
    h[:, 2, 2] = 1.0
    return h


def project(h: np.ndarray, p) -> Point2:
    """Apply a 3x3 transform to a point and dehomogenize."""
    v = np.asarray(h, dtype=float) @ np.array([p[0], p[1], 1.0])
    if abs(v[2]) <= DEPTH_EPS:
        raise ProjectionAtInfinity(f"homogeneous depth {v[2]:.3g}")
    return Point2(float(v[0] / v[2]), float(v[1] / v[2]))


def reprojection_error(c_i: Correspondence, c_j: Correspondence) -> float:
    """How badly ``c_j``'s local transform explains ``c_i``'s keypoint.

    Euclidean distance between ``k_i`` mapped by ``H_j`` and by ``H_i``.
    """
    h_i = local_transform(c_i)
    h_j = local_transform(c_j)
    p = np.subtract(project(h_j, c_i.kp), project(h_i, c_i.kp))
    return float(np.hypot(p[0], p[1]))


def reprojection_error_matrix(corrs, chunk: int = 1024) -> np.ndarray:
    """All ordered reprojection errors: entry ``[i, j]`` is ``e_j(c_i)``.

    The diagonal is exactly zero because the reference point ``H_i k_i`` is
    taken from the same computation that produces ``H_j k_i``.
    """
    arr = as_array(corrs)
    h = local_transforms(arr)
    n = len(arr)
    kp_h = np.concatenate([arr[:, KP], np.ones((n, 1))], axis=1)
    out = np.empty((n, n))
    diag = np.arange(n)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        # proj[i, j] = H_j [k_i; 1]
        proj = np.einsum("jab,ib->ija", h, kp_h[lo:hi])
        depth = proj[..., 2]
        if np.any(np.abs(depth) <= DEPTH_EPS):
            raise ProjectionAtInfinity("near-zero homogeneous depth in reprojection")
        xy = proj[..., :2] / depth[..., None]
        ref = xy[np.arange(hi - lo), diag[lo:hi]]
        d = xy - ref[:, None, :]
        out[lo:hi] = np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)
    return out


# ---------------------------------------------------------------------------
# Epipolar geometry and labeling
# ---------------------------------------------------------------------------


def symmetric_epipolar_distance(e: np.ndarray, c: Correspondence) -> float:
    """Squared residual ``r^2`` over both epipolar-line direction norms.

    ``r = [k'; 1]^T E [k; 1]``; each side contributes ``r^2 / (l1^2 + l2^2)``.
    A side whose line direction vanishes is skipped; if both vanish the
    distance is undefined.
    """
    return float(symmetric_epipolar_distances(e, c.row()[None, :], strict=True)[0])


def symmetric_epipolar_distances(e: np.ndarray, corrs, strict: bool = False) -> np.ndarray:
    """Vectorized :func:`symmetric_epipolar_distance`.

    With ``strict=False`` fully degenerate rows yield ``inf`` instead of raising.
    """
    arr = as_array(corrs)
    e = np.asarray(e, dtype=float)
    n = len(arr)
    x = np.concatenate([arr[:, KP], np.ones((n, 1))], axis=1)
    xp = np.concatenate([arr[:, KP_PRIME], np.ones((n, 1))], axis=1)
    line = x @ e.T  # E x, epipolar line in image 2
    line_p = xp @ e  # E^T x', epipolar line in image 1
    r = np.sum(xp * line, axis=1)
    n2 = line[:, 0] ** 2 + line[:, 1] ** 2
    n1 = line_p[:, 0] ** 2 + line_p[:, 1] ** 2
    ok2 = n2 >= LINE_EPS**2
    ok1 = n1 >= LINE_EPS**2
    both_bad = ~ok1 & ~ok2
    if strict and np.any(both_bad):
        raise DegenerateEpipolar("both epipolar line directions vanish")
    r2 = r * r
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(ok2, r2 / np.where(ok2, n2, 1.0), 0.0) + np.where(ok1, r2 / np.where(ok1, n1, 1.0), 0.0)
    d[both_bad] = np.inf
    return d


def label_set(corrs, e_gt: np.ndarray, threshold: float = LABEL_THRESHOLD) -> np.ndarray:
    """Ground-truth labels: 1 where the symmetric epipolar distance is below threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    d = symmetric_epipolar_distances(e_gt, corrs)
    return (d < threshold).astype(np.int64)


def skew(v) -> np.ndarray:
    """Cross-product matrix ``[v]_x``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def essential_from_pose(r: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``[t]_x R`` scaled to unit Frobenius norm."""
    e = skew(t) @ r
    return e / np.linalg.norm(e)


def project_to_essential(e: np.ndarray) -> np.ndarray:
    """Closest matrix with singular values ``(s, s, 0)``, unit Frobenius norm."""
    u, s, vt = np.linalg.svd(np.asarray(e, dtype=float))
    sigma = 0.5 * (s[0] + s[1])
    out = u @ np.diag([sigma, sigma, 0.0]) @ vt
    return out / np.linalg.norm(out)

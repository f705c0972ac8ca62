"""Synthetic two-view scenes with ground-truth essential matrices and labels.

Coordinates are camera-normalized (focal length 1); both images cover the
square ``[-half_extent, half_extent]^2``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geom
from .errors import GenerationFailed, NoInliers, ParseError, VersionError

FORMAT_VERSION = 1
SCENE_KINDS = ("two-view-3d", "affine-global")
OUTLIER_KINDS = ("uniform", "mixed")

_MAX_POSE_TRIES = 20
_MAX_FILL_ROUNDS = 200


@dataclass(frozen=True)
class GeneratorConfig:
    n_correspondences: int = 500
    inlier_ratio: float = 0.4
    keypoint_noise_sigma: float = 1e-3
    frame_noise_sigma: float = 0.01
    scene_kind: str = "two-view-3d"
    rotation_max: float = 0.3
    translation_scale: float = 1.0
    depth_range: tuple = (4.0, 12.0)
    seed: int = 0
    half_extent: float = 0.5
    frame_scale_range: tuple = (0.01, 0.05)
    frame_max_condition: float = 10.0
    max_tilt: float = 1.0
    outlier_kind: str = "mixed"
    local_outlier_fraction: float = 0.5
    local_offset_range: tuple = (0.02, 0.15)
    label_threshold: float = geom.LABEL_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "depth_range", tuple(float(v) for v in self.depth_range))
        object.__setattr__(self, "frame_scale_range", tuple(float(v) for v in self.frame_scale_range))
        object.__setattr__(self, "local_offset_range", tuple(float(v) for v in self.local_offset_range))
        if self.n_correspondences < 2:
            raise ValueError("n_correspondences must be at least 2")
        if not 0.0 < self.inlier_ratio <= 1.0:
            raise ValueError("inlier_ratio must lie in (0, 1]")
        if self.keypoint_noise_sigma < 0 or self.frame_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        lo, hi = self.depth_range
        if not 0.0 < lo <= hi:
            raise ValueError("depth_range must satisfy 0 < min <= max")
        if self.scene_kind not in SCENE_KINDS:
            raise ValueError(f"scene_kind must be one of {SCENE_KINDS}")
        if self.outlier_kind not in OUTLIER_KINDS:
            raise ValueError(f"outlier_kind must be one of {OUTLIER_KINDS}")
        if self.frame_max_condition < 1.0:
            raise ValueError("frame_max_condition must be >= 1")

    @property
    def n_inliers(self) -> int:
        return int(round(self.inlier_ratio * self.n_correspondences))


@dataclass(eq=False)
class ScenePair:
    corrs: np.ndarray
    labels: np.ndarray
    e_gt: np.ndarray
    seed: int = 0
    kind: str = "two-view-3d"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.corrs)

    @property
    def inlier_ratio(self) -> float:
        return float(np.mean(self.labels)) if len(self.labels) else 0.0

    def permuted(self, perm) -> "ScenePair":
        perm = np.asarray(perm)
        return ScenePair(self.corrs[perm], self.labels[perm], self.e_gt, self.seed, self.kind, dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, ScenePair):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.kind == other.kind
            and self.meta == other.meta
            and _bit_equal(self.corrs, other.corrs)
            and _bit_equal(self.e_gt, other.e_gt)
            and np.array_equal(self.labels, other.labels)
        )


def _bit_equal(a, b) -> bool:
    a, b = np.ascontiguousarray(a, dtype=float), np.ascontiguousarray(b, dtype=float)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# Sampling helpers
# ---------------------------------------------------------------------------


def rotation_from_rotvec(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    if theta < 1e-15:
        return np.eye(3)
    k = geom.skew(v / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def random_unit(rng, n=None) -> np.ndarray:
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_frames(rng, n: int, scale_range=(0.01, 0.05), max_condition: float = 10.0) -> np.ndarray:
    """Random 2x2 frames ``R(a) diag(s1, s2) R(b)`` with ``s1 / s2 <= max_condition``."""
    lo, hi = np.log(scale_range[0]), np.log(scale_range[1])
    scale = np.exp(rng.uniform(lo, hi, n))
    cond = np.exp(rng.uniform(0.0, np.log(max_condition), n))
    s1, s2 = scale * np.sqrt(cond), scale / np.sqrt(cond)
    a, b = rng.uniform(-np.pi, np.pi, (2, n))
    flip = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    ca, sa, cb, sb = np.cos(a), np.sin(a), np.cos(b), np.sin(b)
    rot_a = np.stack([np.stack([ca, -sa], -1), np.stack([sa, ca], -1)], -2)
    rot_b = np.stack([np.stack([cb, -sb], -1), np.stack([sb, cb], -1)], -2)
    diag = np.zeros((n, 2, 2))
    diag[:, 0, 0] = s1
    diag[:, 1, 1] = s2 * flip
    return rot_a @ diag @ rot_b


def homography_jacobian(h: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Image of ``x`` under homographies ``h`` and the 2x2 Jacobian of that map.

    ``h`` is ``(n, 3, 3)`` and ``x`` is ``(n, 2)``.
    """
    xh = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    u = np.einsum("nab,nb->na", h, xh)
    y = u[:, :2] / u[:, 2:3]
    jac = (h[:, :2, :2] - y[:, :, None] * h[:, 2:3, :2]) / u[:, 2, None, None]
    return y, jac


def _in_view(p: np.ndarray, half: float) -> np.ndarray:
    return np.all(np.abs(p) <= half, axis=-1)


def _sample_two_view_inliers(rng, cfg: GeneratorConfig, r: np.ndarray, t: np.ndarray, n: int):
    half = cfg.half_extent
    kps, kps2, jacs = [], [], []
    have = 0
    for _ in range(_MAX_FILL_ROUNDS):
        if have >= n:
            break
        m = max(2 * (n - have), 16)
        x1 = rng.uniform(-half, half, (m, 2))
        z = rng.uniform(*cfg.depth_range, m)
        pts = np.concatenate([x1, np.ones((m, 1))], axis=1) * z[:, None]
        # patch normal: the reversed viewing ray tilted by a random angle
        view = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        perp = np.cross(view, random_unit(rng, m))
        perp /= np.linalg.norm(perp, axis=1, keepdims=True)
        tilt = rng.uniform(0.0, cfg.max_tilt, m)
        normal = -(np.cos(tilt)[:, None] * view + np.sin(tilt)[:, None] * perp)
        plane_d = np.sum(normal * pts, axis=1)
        hom = r[None] + t[None, :, None] * normal[:, None, :] / plane_d[:, None, None]
        pts2 = pts @ r.T + t
        keep = pts2[:, 2] > 1e-3 * cfg.depth_range[0]
        x2 = np.where(keep[:, None], pts2[:, :2] / np.where(keep, pts2[:, 2], 1.0)[:, None], np.inf)
        keep &= _in_view(x2, half)
        if not keep.any():
            continue
        y, jac = homography_jacobian(hom[keep], x1[keep])
        kps.append(x1[keep])
        kps2.append(y)
        jacs.append(jac)
        have += int(keep.sum())
    if have < n:
        return None
    return np.concatenate(kps)[:n], np.concatenate(kps2)[:n], np.concatenate(jacs)[:n]


def _sample_outliers(rng, cfg: GeneratorConfig, e: np.ndarray, n: int, inlier_kp, inlier_kp2):
    """Outlier keypoint pairs rejected until their epipolar distance is at least the label threshold."""
    half = cfg.half_extent
    if n == 0:
        return np.zeros((0, 2)), np.zeros((0, 2))
    out1, out2 = [], []
    have = 0
    n_local = 0
    if cfg.outlier_kind == "mixed" and len(inlier_kp):
        n_local = int(round(cfg.local_outlier_fraction * n))
    for _ in range(_MAX_FILL_ROUNDS):
        if have >= n:
            break
        m = max(2 * (n - have), 16)
        x1 = rng.uniform(-half, half, (m, 2))
        x2 = rng.uniform(-half, half, (m, 2))
        if have < n_local:
            # mismatch near a true match: keep k, displace k'
            src = rng.integers(0, len(inlier_kp), m)
            ang = rng.uniform(-np.pi, np.pi, m)
            rad = rng.uniform(*cfg.local_offset_range, m)
            x1 = inlier_kp[src] + rng.normal(scale=0.01, size=(m, 2))
            x2 = inlier_kp2[src] + rad[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
            x1 = np.clip(x1, -half, half)
            x2 = np.clip(x2, -half, half)
            m = min(m, n_local - have)
            x1, x2 = x1[:m], x2[:m]
        rows = np.zeros((len(x1), 12))
        rows[:, 0:2] = x1
        rows[:, 6:8] = x2
        d = geom.symmetric_epipolar_distances(e, rows)
        keep = d >= cfg.label_threshold
        out1.append(x1[keep])
        out2.append(x2[keep])
        have += int(keep.sum())
    if have < n:
        return None
    return np.concatenate(out1)[:n], np.concatenate(out2)[:n]


def sample_uniform_outliers(rng, n: int, half_extent: float = 0.5) -> np.ndarray:
    """Raw independent uniform keypoint pairs (no rejection) as ``(n, 12)`` rows.

    Frames are identity; only the keypoints matter for epipolar tests.
    """
    rows = np.zeros((n, 12))
    rows[:, 0:2] = rng.uniform(-half_extent, half_extent, (n, 2))
    rows[:, 6:8] = rng.uniform(-half_extent, half_extent, (n, 2))
    rows[:, [2, 5, 8, 11]] = 1.0
    return rows


def _two_view_geometry(rng, cfg: GeneratorConfig, n_in: int, n_out: int):
    for _ in range(_MAX_POSE_TRIES):
        axis = random_unit(rng)
        r = rotation_from_rotvec(axis * rng.uniform(0.0, cfg.rotation_max))
        t = cfg.translation_scale * random_unit(rng)
        if np.linalg.norm(t) < 1e-9:
            continue
        e = geom.essential_from_pose(r, t)
        inl = _sample_two_view_inliers(rng, cfg, r, t, n_in)
        if inl is None:
            continue
        outl = _sample_outliers(rng, cfg, e, n_out, inl[0], inl[1])
        if outl is None:
            continue
        return e, inl, outl
    raise GenerationFailed(f"no usable pose after {_MAX_POSE_TRIES} attempts")


def _affine_global_geometry(rng, cfg: GeneratorConfig, n_in: int, n_out: int):
    """Fronto-parallel plane seen under in-plane rotation and translation.

    Every match then obeys one global similarity ``k' = M k + b`` and the
    pose still yields a valid essential matrix.
    """
    half = cfg.half_extent
    for _ in range(_MAX_POSE_TRIES):
        depth = rng.uniform(*cfg.depth_range)
        theta = rng.uniform(-cfg.rotation_max, cfg.rotation_max)
        r = rotation_from_rotvec([0.0, 0.0, theta])
        t = cfg.translation_scale * random_unit(rng)
        if depth + t[2] <= 1e-3 * depth or np.linalg.norm(t) < 1e-9:
            continue
        lin = depth / (depth + t[2]) * r[:2, :2]
        off = t[:2] / (depth + t[2])
        e = geom.essential_from_pose(r, t)
        kps, kps2 = [], []
        have = 0
        for _ in range(_MAX_FILL_ROUNDS):
            if have >= n_in:
                break
            m = max(2 * (n_in - have), 16)
            x1 = rng.uniform(-half, half, (m, 2))
            x2 = x1 @ lin.T + off
            keep = _in_view(x2, half)
            kps.append(x1[keep])
            kps2.append(x2[keep])
            have += int(keep.sum())
        if have < n_in:
            continue
        kp, kp2 = np.concatenate(kps)[:n_in], np.concatenate(kps2)[:n_in]
        outl = _sample_outliers(rng, cfg, e, n_out, kp, kp2)
        if outl is None:
            continue
        jac = np.broadcast_to(lin, (n_in, 2, 2))
        return e, (kp, kp2, jac), outl
    raise GenerationFailed(f"no usable affine scene after {_MAX_POSE_TRIES} attempts")


def generate(config: GeneratorConfig) -> ScenePair:
    """Sample one labeled scene; identical configs give bit-identical scenes."""
    cfg = config
    n = cfg.n_correspondences
    n_in = cfg.n_inliers
    if cfg.inlier_ratio * n < 1 or n_in < 1:
        raise NoInliers(f"inlier_ratio {cfg.inlier_ratio} yields no inliers for n={n}")
    n_out = n - n_in
    rng = np.random.default_rng(cfg.seed)
    if cfg.scene_kind == "two-view-3d":
        e, (kp, kp2, jac), (o1, o2) = _two_view_geometry(rng, cfg, n_in, n_out)
    else:
        e, (kp, kp2, jac), (o1, o2) = _affine_global_geometry(rng, cfg, n_in, n_out)

    frames_in = random_frames(rng, n_in, cfg.frame_scale_range, cfg.frame_max_condition)
    frames_in2 = jac @ frames_in
    frames_out = random_frames(rng, n_out, cfg.frame_scale_range, cfg.frame_max_condition)
    frames_out2 = random_frames(rng, n_out, cfg.frame_scale_range, cfg.frame_max_condition)

    corrs = np.zeros((n, 12))
    corrs[:n_in, 0:2] = kp
    corrs[:n_in, 2:6] = frames_in.reshape(n_in, 4)
    corrs[:n_in, 6:8] = kp2
    corrs[:n_in, 8:12] = frames_in2.reshape(n_in, 4)
    corrs[n_in:, 0:2] = o1
    corrs[n_in:, 2:6] = frames_out.reshape(n_out, 4)
    corrs[n_in:, 6:8] = o2
    corrs[n_in:, 8:12] = frames_out2.reshape(n_out, 4)
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_in] = 1

    perm = rng.permutation(n)
    corrs, labels = corrs[perm], labels[perm]

    # noise after the labels are fixed
    if cfg.keypoint_noise_sigma > 0:
        corrs[:, [0, 1, 6, 7]] += rng.normal(scale=cfg.keypoint_noise_sigma, size=(n, 4))
    if cfg.frame_noise_sigma > 0:
        cols = [2, 3, 4, 5, 8, 9, 10, 11]
        corrs[:, cols] *= 1.0 + rng.normal(scale=cfg.frame_noise_sigma, size=(n, 8))

    return ScenePair(corrs, labels, e, cfg.seed, cfg.scene_kind, {"config": config_to_dict(cfg)})


def generate_many(config: GeneratorConfig, count: int, seed: int | None = None) -> list[ScenePair]:
    """``count`` scenes with per-scene seeds drawn from one master seed."""
    master = np.random.default_rng(config.seed if seed is None else seed)
    seeds = master.integers(0, 2**63 - 1, size=count)
    return [generate(_replace(config, seed=int(s))) for s in seeds]


def _replace(cfg: GeneratorConfig, **kw) -> GeneratorConfig:
    d = asdict(cfg)
    d.update(kw)
    return GeneratorConfig(**d)


def config_to_dict(cfg: GeneratorConfig) -> dict:
    d = asdict(cfg)
    for key in ("depth_range", "frame_scale_range", "local_offset_range"):
        d[key] = list(d[key])
    return d


# ---------------------------------------------------------------------------
# Dataset files: one JSON object per line
# ---------------------------------------------------------------------------


def scene_to_record(scene: ScenePair) -> dict:
    return {
        "version": FORMAT_VERSION,
        "seed": int(scene.seed),
        "kind": scene.kind,
        "e_gt": np.asarray(scene.e_gt, dtype=float).reshape(9).tolist(),
        "corrs": np.asarray(scene.corrs, dtype=float).tolist(),
        "labels": [int(v) for v in scene.labels],
        "meta": scene.meta,
    }


def scene_from_record(rec: dict, line: int | None = None) -> ScenePair:
    if not isinstance(rec, dict):
        raise ParseError("record is not an object", line)
    if "version" not in rec:
        raise ParseError("missing 'version'", line)
    if rec["version"] != FORMAT_VERSION:
        raise VersionError(f"line {line}: unsupported dataset version {rec['version']!r}")
    try:
        e = np.array(rec["e_gt"], dtype=float)
        corrs = np.array(rec["corrs"], dtype=float).reshape(-1, 12)
        labels = np.array(rec["labels"], dtype=np.int64)
        seed = int(rec["seed"])
        kind = str(rec["kind"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed record: {exc}", line) from exc
    if e.shape != (9,):
        raise ParseError("e_gt must hold 9 numbers", line)
    if len(labels) != len(corrs):
        raise ParseError("labels and corrs differ in length", line)
    if not np.all(np.isin(labels, (0, 1))):
        raise ParseError("labels must be 0 or 1", line)
    if not np.all(np.isfinite(corrs)):
        raise ParseError("non-finite correspondence value", line)
    return ScenePair(corrs, labels, e.reshape(3, 3), seed, kind, rec.get("meta", {}))


def dumps_scene(scene: ScenePair) -> str:
    return json.dumps(scene_to_record(scene), separators=(",", ":"), allow_nan=False)


def write_dataset(path, scenes) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for scene in scenes:
            fh.write(dumps_scene(scene))
            fh.write("\n")


def read_dataset(path) -> list[ScenePair]:
    scenes = []
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                raise ParseError("blank line", lineno)
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from exc
            scenes.append(scene_from_record(rec, lineno))
    return scenes

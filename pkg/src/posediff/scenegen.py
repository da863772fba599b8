"""Synthetic multi-view scenes with exact projections.

Two trajectory families are generated:

* ``orbit``: cameras on a sphere around an anisotropic point cloud, all looking
  at its centroid (turn-table capture of an object);
* ``linear``: cameras moving along a line through a volume of points, looking
  roughly along the direction of travel (fly-through capture).

Noiseless scenes satisfy every epipolar constraint exactly and serve as the
oracle for the geometry and guidance code. Per-frame conditioning is a cheap
stand-in for image features: statistics of the projected points pushed
through a fixed random linear map.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .geometry import Camera, CorrespondenceSet, PoseTuple, quat_to_rotmat, rotmat_to_quat

EMBED_DIM = 64
N_STATS = 6
_EMBED_SEED = 20230317
MAX_RESAMPLES = 20


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    n_frames: int = 8
    trajectory: str = "orbit"
    n_points: int = 200
    focal_range: tuple = (1.0, 2.0)
    match_noise_sigma: float = 0.0
    outlier_rate: float = 0.0
    seed: int = 0
    max_matches_per_pair: int = 64
    n_groups: int = 8

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("a scene needs at least 2 frames")
        if self.n_points < 8:
            raise ValueError("a scene needs at least 8 points")
        if self.trajectory not in ("orbit", "linear"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if not 0 <= self.outlier_rate < 1:
            raise ValueError("outlier_rate must lie in [0, 1)")
        if self.match_noise_sigma < 0:
            raise ValueError("match_noise_sigma must be non-negative")
        lo, hi = self.focal_range
        if not 0 < lo <= hi:
            raise ValueError("focal_range must satisfy 0 < lo <= hi")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["focal_range"] = list(self.focal_range)
        return d

    @classmethod
    def from_dict(cls, d) -> "SceneSpec":
        d = dict(d)
        if "focal_range" in d:
            d["focal_range"] = tuple(d["focal_range"])
        return cls(**d)


@dataclass
class SceneRecord:
    ground_truth: PoseTuple
    conditioning: np.ndarray
    matches: list
    spec: SceneSpec
    points: np.ndarray | None = None
    outlier_masks: list = field(default_factory=list)
    name: str = ""

    @property
    def n_frames(self) -> int:
        return len(self.ground_truth)


# ------------------------------------------------------------------ cameras

def look_at(center, target, up=(0.0, 0.0, 1.0), roll: float = 0.0):
    """World-to-camera rotation for a camera at ``center`` looking at ``target`` (+z forward)."""
    fwd = np.asarray(target, float) - np.asarray(center, float)
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(fwd, (1.0, 0.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    c, s = np.cos(roll), np.sin(roll)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]) @ R


def _random_rotation(rng):
    q = rng.standard_normal(4)
    return quat_to_rotmat(q / np.linalg.norm(q))


def _orbit(spec: SceneSpec, rng):
    axes = rng.uniform(0.3, 1.0, size=3)
    rot = _random_rotation(rng)
    points = (rng.standard_normal((spec.n_points, 3)) * axes) @ rot.T
    points -= points.mean(axis=0)
    radius = rng.uniform(3.0, 5.0)
    elevation = np.deg2rad(rng.uniform(10.0, 40.0))
    arc = np.deg2rad(rng.uniform(60.0, 180.0))
    azimuth = rng.uniform(0, 2 * np.pi) + np.sort(rng.uniform(0.0, arc, size=spec.n_frames))
    cams = []
    log_f = np.log(rng.uniform(*spec.focal_range))
    for az in azimuth:
        r = radius * rng.uniform(0.95, 1.05)
        el = elevation + np.deg2rad(rng.normal(0, 3.0))
        center = r * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        target = rng.normal(0, 0.05, size=3)
        R = look_at(center, target, roll=np.deg2rad(rng.normal(0, 3.0)))
        cams.append(Camera(log_f + rng.normal(0, 0.05), rotmat_to_quat(R), -R @ center))
    return cams, points


def _linear(spec: SceneSpec, rng):
    heading = rng.uniform(0, 2 * np.pi)
    direction = np.array([np.cos(heading), np.sin(heading), 0.0])
    side = np.array([-direction[1], direction[0], 0.0])
    length = rng.uniform(1.0, 3.0)
    # points fill a slab ahead of the whole trajectory
    depth = rng.uniform(length + 3.0, length + 10.0, size=spec.n_points)
    lateral = rng.uniform(-1.0, 1.0, size=spec.n_points) * depth * 0.5
    height = rng.uniform(-1.0, 1.0, size=spec.n_points) * depth * 0.35
    points = depth[:, None] * direction + lateral[:, None] * side + height[:, None] * np.array([0, 0, 1.0])
    log_f = np.log(rng.uniform(*spec.focal_range))
    cams = []
    for s in np.sort(rng.uniform(0.0, length, size=spec.n_frames)):
        center = s * direction + rng.normal(0, 0.05, size=3)
        yaw = heading + np.deg2rad(rng.normal(0, 5.0))
        fwd = np.array([np.cos(yaw), np.sin(yaw), np.deg2rad(rng.normal(0, 2.0))])
        R = look_at(center, center + fwd, roll=np.deg2rad(rng.normal(0, 2.0)))
        cams.append(Camera(log_f + rng.normal(0, 0.05), rotmat_to_quat(R), -R @ center))
    return cams, points


def _visibility(cams, points):
    vis = np.zeros((len(cams), len(points)), dtype=bool)
    proj = np.zeros((len(cams), len(points), 2))
    for k, cam in enumerate(cams):
        p_c = cam.to_camera_frame(points)
        front = p_c[:, 2] > 1e-6
        uv = np.full((len(points), 2), np.inf)
        uv[front] = cam.focal * p_c[front, :2] / p_c[front, 2:3]
        vis[k] = front & (np.abs(uv) <= 1.0).all(axis=1)
        proj[k] = np.where(vis[k][:, None], uv, 0.0)
    return vis, proj


# --------------------------------------------------------------- conditioning

def embedding_matrix(n_stats: int, dim: int = EMBED_DIM) -> np.ndarray:
    """Fixed random linear map from frame statistics to the embedding space."""
    rng = np.random.default_rng(_EMBED_SEED)
    return rng.standard_normal((n_stats, dim)) / np.sqrt(n_stats)


def frame_statistics(proj_points, n_total: int) -> np.ndarray:
    """Mean, spread and correlation of a frame's visible projections, plus coverage."""
    p = np.asarray(proj_points, float)
    if len(p) < 2:
        return np.zeros(N_STATS)
    mean = p.mean(axis=0)
    cov = np.cov(p.T)
    sx, sy = np.sqrt(cov[0, 0]), np.sqrt(cov[1, 1])
    corr = cov[0, 1] / (sx * sy + 1e-12)
    # spreads are O(0.1) in normalized coordinates; rescale to O(1)
    return np.array([4 * mean[0], 4 * mean[1], 4 * sx, 4 * sy, corr, len(p) / n_total])


def point_groups(points, n_groups: int, rng) -> np.ndarray:
    """Assign points to ``n_groups`` spatial groups by nearest anchor (farthest-point anchors)."""
    anchors = [int(rng.integers(len(points)))]
    d = np.linalg.norm(points - points[anchors[0]], axis=1)
    for _ in range(n_groups - 1):
        anchors.append(int(np.argmax(d)))
        d = np.minimum(d, np.linalg.norm(points - points[anchors[-1]], axis=1))
    dist = np.linalg.norm(points[:, None] - points[anchors][None], axis=2)
    return np.argmin(dist, axis=1)


def embed_frames(vis, proj, groups=None, dim: int = EMBED_DIM) -> np.ndarray:
    """Per-frame conditioning: statistics of the whole cloud and of each point group."""
    n_total = vis.shape[1]
    labels = [np.ones(n_total, bool)]
    if groups is not None:
        labels += [groups == g for g in range(groups.max() + 1)]
    stats = np.stack([
        np.concatenate([frame_statistics(proj[k][vis[k] & sel], n_total) for sel in labels])
        for k in range(len(vis))
    ])
    return stats @ embedding_matrix(stats.shape[1], dim)


# --------------------------------------------------------------------- scenes

def generate_scene(spec: SceneSpec, name: str = "") -> SceneRecord:
    """Sample one scene: cameras, points, conditioning and pairwise matches.

    Geometry, match selection, match noise and outliers use independent random
    streams, so changing the corruption settings never changes the geometry.
    """
    geo_ss, pick_ss, noise_ss, out_ss = np.random.SeedSequence(spec.seed).spawn(4)
    geo_rng = np.random.default_rng(geo_ss)
    build = _orbit if spec.trajectory == "orbit" else _linear
    for _ in range(MAX_RESAMPLES):
        cams, points = build(spec, geo_rng)
        vis, proj = _visibility(cams, points)
        keep = vis.sum(axis=0) >= 2
        if keep.sum() >= 8 and all(
                (vis[i] & vis[j]).sum() >= 8 for i, j in combinations(range(len(cams)), 2)):
            break
    else:
        raise SceneGenerationError(f"could not make every frame pair share 8 points (seed {spec.seed})")
    points, vis, proj = points[keep], vis[:, keep], proj[:, keep]
    groups = point_groups(points, spec.n_groups, geo_rng) if spec.n_groups > 0 else None

    pick_rng = np.random.default_rng(pick_ss)
    noise_rng = np.random.default_rng(noise_ss)
    out_rng = np.random.default_rng(out_ss)
    matches, masks = [], []
    for i, j in combinations(range(len(cams)), 2):
        shared = np.flatnonzero(vis[i] & vis[j])
        if len(shared) > spec.max_matches_per_pair:
            shared = np.sort(pick_rng.choice(shared, spec.max_matches_per_pair, replace=False))
        pi = proj[i, shared].copy()
        pj = proj[j, shared].copy()
        noise = noise_rng.standard_normal((2,) + pi.shape)
        if spec.match_noise_sigma > 0:
            pi += spec.match_noise_sigma * noise[0]
            pj += spec.match_noise_sigma * noise[1]
        draws = out_rng.uniform(size=len(shared))
        replacement = out_rng.uniform(-1.0, 1.0, size=(len(shared), 2))
        outlier = draws < spec.outlier_rate
        pj[outlier] = replacement[outlier]
        matches.append(CorrespondenceSet(i, j, pi, pj))
        masks.append(outlier)

    return SceneRecord(
        ground_truth=PoseTuple.from_cameras(cams),
        conditioning=embed_frames(vis, proj, groups),
        matches=matches,
        spec=spec,
        points=points,
        outlier_masks=masks,
        name=name,
    )


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class Dataset:
    train: list
    test: list

    @property
    def scenes(self):
        return self.train + self.test


def generate_dataset(n_scenes: int, spec: SceneSpec | None = None, seed: int = 0,
                     train_ratio: float = 0.8) -> Dataset:
    """``n_scenes`` scenes drawn from ``spec`` (its seed is replaced per scene), split train/test.

    ``spec`` may also be a callable ``(index, rng) -> SceneSpec`` to vary scene
    settings across the dataset.
    """
    if n_scenes < 2:
        raise ValueError("a dataset needs at least 2 scenes")
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    scenes = []
    for k in range(n_scenes):
        s = spec(k, rng) if callable(spec) else spec
        s = dataclasses.replace(s, seed=scene_seed(seed, k))
        scenes.append(generate_scene(s, name=f"scene_{k:05d}"))
    order = rng.permutation(n_scenes)
    n_train = int(round(train_ratio * n_scenes))
    n_train = min(max(n_train, 1), n_scenes - 1)
    return Dataset([scenes[k] for k in sorted(order[:n_train])],
                   [scenes[k] for k in sorted(order[n_train:])])


def with_corruption(scene: SceneRecord, match_noise_sigma: float = 0.0,
                    outlier_rate: float = 0.0) -> SceneRecord:
    """Regenerate ``scene`` with different match corruption but identical geometry."""
    spec = dataclasses.replace(scene.spec, match_noise_sigma=match_noise_sigma,
                               outlier_rate=outlier_rate)
    return generate_scene(spec, name=scene.name)

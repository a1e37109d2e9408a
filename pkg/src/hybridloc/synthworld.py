"""Seeded synthetic scenes with exact ground truth.

A scene is a box-shaped point cloud watched by a camera sweeping an arc
around it. Scan keypoints are a subset of the world points with known 3D
coordinates; 2D-3D matches against them feed relocalization, while plain
feature tracks over all points feed SfM.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .errors import InvalidArgumentError
from .geometry import Intrinsics, Pose, look_at, nearest_rotation, project_many

MIN_KEYPOINTS_PER_FRAME = 6


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 200
    n_frames: int = 20
    n_queries: int = 5
    keypoint_fraction: float = 0.5
    # cloud half-extents along x, y, z (meters)
    extent: tuple[float, float, float] = (2.0, 2.0, 1.0)
    orbit_radius: float = 7.0
    orbit_arc_deg: float = 100.0
    orbit_height: float = 0.6
    n_waypoints: int = 5
    waypoint_jitter: float = 0.25
    fx: float = 500.0
    fy: float = 500.0
    width: int = 640
    height: int = 480
    # inclusive frame range whose video tracks are lost (SfM failure)
    failure_segment: tuple[int, int] | None = None


@dataclass(frozen=True)
class NoiseSpec:
    pixel_sigma: float = 0.0
    outlier_rate: float = 0.0
    depth_sigma: float = 0.0
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.outlier_rate < 1:
            raise InvalidArgumentError("outlier_rate must lie in [0, 1)")
        if not 0 <= self.dropout_rate <= 1:
            raise InvalidArgumentError("dropout_rate must lie in [0, 1]")
        if self.pixel_sigma < 0 or self.depth_sigma < 0:
            raise InvalidArgumentError("noise sigmas must be non-negative")


@dataclass(frozen=True, eq=False)
class QueryTruth:
    query_id: int
    object_center: np.ndarray
    query_frame: int


@dataclass(eq=False)
class SceneTruth:
    point_ids: np.ndarray          # (n,) int
    points: np.ndarray             # (n, 3)
    keypoint_ids: np.ndarray       # sorted subset of point_ids
    trajectory: list[Pose]
    intrinsics: Intrinsics
    queries: list[QueryTruth]
    failure_segment: tuple[int, int] | None = None

    @property
    def n_frames(self) -> int:
        return len(self.trajectory)

    def point(self, pid: int) -> np.ndarray:
        return self.points[np.searchsorted(self.point_ids, pid)]

    def keypoint_coords(self) -> dict[int, np.ndarray]:
        idx = np.searchsorted(self.point_ids, self.keypoint_ids)
        return {int(p): self.points[i] for p, i in zip(self.keypoint_ids, idx)}

    def in_failure_segment(self, frame: int) -> bool:
        if self.failure_segment is None:
            return False
        lo, hi = self.failure_segment
        return lo <= frame <= hi


@dataclass(eq=False)
class TrackSet:
    """Noisy observations of a scene.

    ``observations`` rows are ``(frame, point_id, u, v, true_depth)`` sorted by
    frame then point id. ``matches`` maps frame -> rows ``(claimed_id, u, v)``
    of 2D-3D matches against scan keypoints.
    """

    observations: np.ndarray
    matches: dict[int, np.ndarray]
    _outlier_mask: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.observations)

    def frames(self) -> np.ndarray:
        return np.unique(self.observations[:, 0].astype(int))


@dataclass(frozen=True)
class DetectionRecord:
    query_id: int
    frame: int
    u: float
    v: float
    depth: float
    confidence: float


def _rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1),
                                                         *label.encode()]))


def generate_scene(config: SceneConfig = SceneConfig(), seed: int = 0) -> SceneTruth:
    c = config
    if c.n_points < 8:
        raise InvalidArgumentError("a scene needs at least 8 world points")
    if c.n_frames < 2:
        raise InvalidArgumentError("a scene needs at least 2 frames")
    if c.n_queries < 0 or not 0 < c.keypoint_fraction <= 1:
        raise InvalidArgumentError("invalid query count or keypoint fraction")
    if c.failure_segment is not None:
        lo, hi = c.failure_segment
        if not 0 <= lo <= hi < c.n_frames:
            raise InvalidArgumentError(f"failure segment {c.failure_segment} outside frame range")

    rng = _rng(seed, "scene")
    ext = np.asarray(c.extent, dtype=np.float64)
    points = rng.uniform(-ext, ext, size=(c.n_points, 3))
    point_ids = np.arange(c.n_points)
    n_kp = max(MIN_KEYPOINTS_PER_FRAME, int(round(c.keypoint_fraction * c.n_points)))
    keypoint_ids = np.sort(rng.choice(point_ids, size=min(n_kp, c.n_points), replace=False))

    # waypoints on an arc, each looking at a jittered spot near the cloud center
    half = np.deg2rad(c.orbit_arc_deg) / 2.0
    angles = np.linspace(-half, half, c.n_waypoints)
    key_rots, key_pos = [], []
    for a in angles:
        pos = np.array([c.orbit_radius * np.cos(a), c.orbit_radius * np.sin(a), c.orbit_height])
        pos = pos + rng.normal(0.0, c.waypoint_jitter, 3)
        target = rng.normal(0.0, c.waypoint_jitter, 3)
        key_pos.append(pos)
        key_rots.append(look_at(pos, target).rotation)
    key_times = np.linspace(0.0, 1.0, c.n_waypoints)
    times = np.linspace(0.0, 1.0, c.n_frames)
    slerp = Slerp(key_times, Rotation.from_matrix(np.array(key_rots)))
    rots = slerp(times).as_matrix()
    key_pos = np.array(key_pos)
    pos = np.column_stack([np.interp(times, key_times, key_pos[:, i]) for i in range(3)])
    trajectory = [Pose(nearest_rotation(R), p) for R, p in zip(rots, pos)]

    k = Intrinsics(c.fx, c.fy, (c.width - 1) / 2.0, (c.height - 1) / 2.0, c.width, c.height)

    kp_idx = np.searchsorted(point_ids, keypoint_ids)
    for f, pose in enumerate(trajectory):
        px, z = project_many(points[kp_idx], pose, k)
        n_vis = int(np.sum((z > 0) & k.in_bounds(np.nan_to_num(px, nan=-1.0))))
        if n_vis < MIN_KEYPOINTS_PER_FRAME:
            raise InvalidArgumentError(
                f"frame {f} sees only {n_vis} scan keypoints; enlarge the cloud or keypoint fraction")

    # objects inside the cloud; query frames evenly spread over the clip
    queries = []
    q_frames = (np.linspace(0, c.n_frames - 1, c.n_queries).round().astype(int)
                if c.n_queries else np.array([], dtype=int))
    for q in range(c.n_queries):
        for _ in range(1000):
            obj = rng.uniform(-0.8 * ext, 0.8 * ext)
            if any(_visible(obj, pose, k) for pose in trajectory):
                break
        else:
            raise InvalidArgumentError("could not place a visible query object")
        queries.append(QueryTruth(q, obj, int(q_frames[q])))

    return SceneTruth(point_ids, points, keypoint_ids, trajectory, k, queries,
                      tuple(c.failure_segment) if c.failure_segment is not None else None)


def _visible(point, pose: Pose, k: Intrinsics) -> bool:
    px, z = project_many(point, pose, k)
    return bool(z[0] > 0 and k.in_bounds(px[0]))


def render_tracks(scene: SceneTruth, noise: NoiseSpec = NoiseSpec()) -> TrackSet:
    """Observe every visible point in every frame, then corrupt per ``noise``.

    Video tracks in the scene's failure segment are removed entirely; scan
    keypoint matches there are kept.
    """
    rng = _rng(noise.seed, "tracks")
    k = scene.intrinsics
    is_kp = np.isin(scene.point_ids, scene.keypoint_ids)
    kp_ids = scene.keypoint_ids
    rows, matches, outliers = [], {}, {}
    for f, pose in enumerate(scene.trajectory):
        px, z = project_many(scene.points, pose, k)
        vis = z > 0
        px_noisy = px + rng.normal(0.0, noise.pixel_sigma, px.shape) if noise.pixel_sigma else px
        vis &= k.in_bounds(np.nan_to_num(px_noisy, nan=-1.0))
        keep = vis & (rng.random(len(vis)) >= noise.dropout_rate)
        idx = np.flatnonzero(keep)

        if not scene.in_failure_segment(f):
            for i in idx:
                rows.append((f, scene.point_ids[i], px_noisy[i, 0], px_noisy[i, 1], z[i]))

        m_idx = idx[is_kp[idx]]
        claimed = scene.point_ids[m_idx].copy()
        bad = rng.random(len(m_idx)) < noise.outlier_rate
        for j in np.flatnonzero(bad):
            others = kp_ids[kp_ids != claimed[j]]
            claimed[j] = rng.choice(others)
        if len(m_idx):
            matches[f] = np.column_stack([claimed, px_noisy[m_idx]])
            outliers[f] = bad
    obs = np.array(rows, dtype=np.float64).reshape(-1, 5)
    return TrackSet(obs, matches, outliers)


def make_detections(scene: SceneTruth, noise: NoiseSpec = NoiseSpec()) -> list[DetectionRecord]:
    """Per-query detections with a single-bump confidence profile over the
    frames where the object is visible."""
    rng = _rng(noise.seed, "detections")
    k = scene.intrinsics
    out = []
    for q in scene.queries:
        vis = []
        for f, pose in enumerate(scene.trajectory):
            px, z = project_many(q.object_center, pose, k)
            if z[0] > 0 and k.in_bounds(px[0]):
                vis.append((f, px[0], z[0]))
        if not vis:
            continue
        peak = vis[int(rng.integers(len(vis)))][0]
        width = max(1.0, len(vis) / 4.0)
        for f, px, z in vis:
            conf = 0.2 + 0.75 * np.exp(-((f - peak) / width) ** 2)
            u, v = px + (rng.normal(0.0, noise.pixel_sigma, 2) if noise.pixel_sigma else 0.0)
            d = z + (rng.normal(0.0, noise.depth_sigma) if noise.depth_sigma else 0.0)
            out.append(DetectionRecord(q.query_id, f, float(u), float(v), float(max(d, 1e-3)), float(conf)))
    return out

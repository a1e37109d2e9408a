"""Core types and projective operations.

Conventions
-----------
* ``Pose`` is camera-to-world: a camera-frame point ``x_cam`` maps to the
  world as ``R @ x_cam + t``; ``t`` is therefore the camera center.
* Camera axes: x right, y down, z forward. Pixels ``(u, v)`` are continuous.
* Pinhole model, no distortion. World units are meters.
"""
from __future__ import annotations

import enum
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError

ORTHO_TOL = 1e-9


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"non-finite values in {arr!r}")
    arr.flags.writeable = False
    return arr


def skew(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues' formula: axis-angle vector to rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        # second-order Taylor expansion
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / theta**2 * K @ K)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-8:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        B = (R + np.eye(3)) / 2.0
        axis = B[np.argmax(np.diag(B))]
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * w


def nearest_rotation(M) -> np.ndarray:
    """Closest rotation matrix in Frobenius norm (SVD projection onto SO(3))."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def is_rotation(R, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=np.float64)
    return (R.shape == (3, 3)
            and np.max(np.abs(R @ R.T - np.eye(3))) <= tol
            and abs(np.linalg.det(R) - 1.0) <= 10 * tol)


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        if not is_rotation(R):
            raise InvalidArgumentError("pose rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_world_to_camera(cls, R_wc, t_wc) -> "Pose":
        """Build from ``x_cam = R_wc @ x_world + t_wc``."""
        R_wc = np.asarray(R_wc, dtype=np.float64)
        return cls(R_wc.T, -R_wc.T @ np.asarray(t_wc, dtype=np.float64))

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        Rt = self.rotation.T
        return Rt, -Rt @ self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def transform(self, points) -> np.ndarray:
        """Map camera-frame points (..., 3) into the world frame."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def to_camera(self, points) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        return (np.asarray(points) - self.translation) @ self.rotation

    def __repr__(self):
        return f"Pose(rotvec={so3_log(self.rotation).round(6)}, center={self.translation.round(6)})"


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def normalize(self, pixels) -> np.ndarray:
        """Pixels (..., 2) to normalized image-plane coordinates (..., 2)."""
        px = np.asarray(pixels, dtype=np.float64)
        return np.stack([(px[..., 0] - self.cx) / self.fx,
                         (px[..., 1] - self.cy) / self.fy], axis=-1)

    def in_bounds(self, pixels) -> np.ndarray:
        px = np.asarray(pixels)
        return ((px[..., 0] >= 0) & (px[..., 0] < self.width)
                & (px[..., 1] >= 0) & (px[..., 1] < self.height))


@dataclass(frozen=True, eq=False)
class Sim3:
    """Similarity transform ``x -> scale * R @ x + t``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidArgumentError("Sim3 scale must be positive")
        R = _frozen(self.rotation, (3, 3))
        if not is_rotation(R):
            raise InvalidArgumentError("Sim3 rotation is not orthonormal with det +1")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply_points(self, points) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self) -> "Sim3":
        Rt = self.rotation.T
        return Sim3(1.0 / self.scale, Rt, -Rt @ self.translation / self.scale)


class Provenance(str, enum.Enum):
    SFM = "SFM"
    PNP = "PNP"
    HYBRID_SFM = "HYBRID-SFM"
    HYBRID_PNP = "HYBRID-PNP"


class PoseEntry(NamedTuple):
    pose: Pose
    provenance: Provenance


class PoseTable(Mapping):
    """Partial map frame index -> (Pose, provenance).

    Frames whose pose could not be estimated are simply absent.
    """

    def __init__(self, entries: Mapping[int, PoseEntry] | None = None):
        self._entries: dict[int, PoseEntry] = {}
        for frame, entry in sorted((entries or {}).items()):
            frame = int(frame)
            if frame < 0:
                raise InvalidArgumentError(f"negative frame index {frame}")
            pose, prov = entry
            self._entries[frame] = PoseEntry(pose, Provenance(prov))

    @classmethod
    def from_poses(cls, poses: Mapping[int, Pose], provenance: Provenance) -> "PoseTable":
        return cls({f: PoseEntry(p, provenance) for f, p in poses.items()})

    def __getitem__(self, frame: int) -> PoseEntry:
        return self._entries[frame]

    def __iter__(self) -> Iterator[int]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def pose(self, frame: int) -> Pose | None:
        entry = self._entries.get(frame)
        return None if entry is None else entry.pose

    def frames(self) -> list[int]:
        return list(self._entries)

    def centers(self, frames=None) -> np.ndarray:
        frames = self.frames() if frames is None else frames
        return np.array([self._entries[f].pose.center for f in frames]).reshape(-1, 3)

    def count_by_provenance(self) -> dict[str, int]:
        counts = {p.value: 0 for p in Provenance}
        for entry in self._entries.values():
            counts[entry.provenance.value] += 1
        return counts

    def __repr__(self):
        return f"PoseTable({len(self)} frames: {self.frames()})"


def project(point, pose: Pose, k: Intrinsics) -> tuple[np.ndarray, float] | None:
    """Project a world point; returns ``(pixel, depth)`` or None if behind the camera."""
    x = pose.to_camera(np.asarray(point, dtype=np.float64))
    z = x[2]
    if not z > 0:
        return None
    return np.array([k.fx * x[0] / z + k.cx, k.fy * x[1] / z + k.cy]), float(z)


def project_many(points, pose: Pose, k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns pixels (n, 2) and depths (n,); pixels of
    points with non-positive depth are NaN."""
    x = pose.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = x[:, 2]
    ok = z > 0
    zs = np.where(ok, z, np.nan)
    px = np.stack([k.fx * x[:, 0] / zs + k.cx, k.fy * x[:, 1] / zs + k.cy], axis=1)
    return px, z


def backproject(px, depth: float, k: Intrinsics, pose: Pose) -> np.ndarray:
    """Lift a pixel with known depth to a world point.

    The pixel ray ``K^-1 [u, v, 1]`` is scaled by depth, given a homogeneous
    1 and pushed through the camera-to-world transform.
    """
    if not depth > 0:
        raise InvalidArgumentError(f"depth must be positive, got {depth}")
    u, v = np.asarray(px, dtype=np.float64)
    ray = k.K_inv @ np.array([u, v, 1.0])
    return pose.rotation @ (depth * ray) + pose.translation


def pose_inverse(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def pose_compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def apply_sim3(s: Sim3, p: Pose) -> Pose:
    return Pose(s.rotation @ p.rotation, s.scale * s.rotation @ p.translation + s.translation)


def rotation_angle(a, b) -> float:
    """Geodesic distance on SO(3), in radians.

    Equal to ``arccos((trace(a^T b) - 1) / 2)`` for rotations; evaluated with
    atan2 so that small angles keep full precision.
    """
    M = np.asarray(a).T @ np.asarray(b)
    s = np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    c = np.trace(M) - 1.0
    return float(np.clip(np.arctan2(s, c), 0.0, np.pi))


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at ``center`` with its optical axis toward ``target``."""
    center = np.asarray(center, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - center
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    n = np.linalg.norm(r)
    if n < 1e-12:
        raise InvalidArgumentError("viewing direction is parallel to the up vector")
    r /= n
    d = np.cross(f, r)
    return Pose(np.column_stack([r, d, f]), center)

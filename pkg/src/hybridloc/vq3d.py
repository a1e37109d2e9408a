"""Per-query 3D object prediction from 2D detections and camera poses."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NoDetectionError, NoPoseError
from .geometry import Intrinsics, Pose, PoseTable, backproject

DEFAULT_PROMINENCE = 0.1


@dataclass(frozen=True)
class Detection:
    query_id: int
    frame_index: int
    center: tuple[float, float]
    depth: float
    confidence: float

    def __post_init__(self):
        if not self.depth > 0:
            raise InvalidArgumentError(f"detection depth must be positive, got {self.depth}")
        if not 0 < self.confidence <= 1:
            raise InvalidArgumentError(f"confidence must lie in (0, 1], got {self.confidence}")


class Status(str, enum.Enum):
    OK = "OK"
    NO_POSE = "NO_POSE"
    NO_DETECTION = "NO_DETECTION"


@dataclass(frozen=True, eq=False)
class Prediction:
    query_id: int
    status: Status
    object_world: np.ndarray | None = None
    displacement: np.ndarray | None = None
    views_used: int = 0


def select_peak_frames(confidences, min_prominence: float = DEFAULT_PROMINENCE) -> list[int]:
    """Frames at prominent confidence peaks.

    ``confidences`` is an ordered sequence of ``(frame, confidence)``. An
    interior strict local maximum qualifies when its height above the higher
    of its two flanking minima reaches ``min_prominence``; an end element
    qualifies when it exceeds its only neighbor by that much. Without any
    qualifying peak the first global maximum is returned.
    """
    seq = list(confidences)
    if not seq:
        raise InvalidArgumentError("confidence sequence is empty")
    frames = [int(f) for f, _ in seq]
    c = np.array([float(v) for _, v in seq])
    n = len(c)
    peaks = []
    for i in range(n):
        if n == 1:
            break
        if i == 0 or i == n - 1:
            j = 1 if i == 0 else n - 2
            if c[i] - c[j] >= min_prominence:
                peaks.append(frames[i])
            continue
        if not (c[i] > c[i - 1] and c[i] > c[i + 1]):
            continue
        # walk outwards until a higher value or the sequence end
        lo = i
        left_min = c[i]
        while lo > 0 and c[lo - 1] <= c[i]:
            lo -= 1
            left_min = min(left_min, c[lo])
        hi = i
        right_min = c[i]
        while hi < n - 1 and c[hi + 1] <= c[i]:
            hi += 1
            right_min = min(right_min, c[hi])
        if c[i] - max(left_min, right_min) >= min_prominence:
            peaks.append(frames[i])
    if not peaks:
        peaks = [frames[int(np.argmax(c))]]
    return peaks


def lift_detection(det: Detection, pose: Pose | None, k: Intrinsics) -> np.ndarray:
    if pose is None:
        raise NoPoseError(f"no camera pose for frame {det.frame_index}")
    return backproject(det.center, det.depth, k, pose)


def aggregate_prediction(lifted) -> np.ndarray:
    """Confidence-weighted mean of ``(point, confidence)`` pairs."""
    lifted = list(lifted)
    if not lifted:
        raise NoDetectionError("nothing to aggregate")
    pts = np.array([p for p, _ in lifted], dtype=np.float64).reshape(-1, 3)
    w = np.array([c for _, c in lifted], dtype=np.float64)
    return (w @ pts) / w.sum()


def predict_query(detections, poses: PoseTable, k: Intrinsics, query_frame: int,
                  query_id: int | None = None,
                  min_prominence: float = DEFAULT_PROMINENCE) -> Prediction:
    dets = sorted(detections, key=lambda d: d.frame_index)
    if query_id is None:
        query_id = dets[0].query_id if dets else -1
    query_pose = poses.pose(query_frame)
    if query_pose is None:
        return Prediction(query_id, Status.NO_POSE)
    if not dets:
        return Prediction(query_id, Status.NO_DETECTION)

    peaks = set(select_peak_frames([(d.frame_index, d.confidence) for d in dets], min_prominence))
    lifted = [(lift_detection(d, poses.pose(d.frame_index), k), d.confidence)
              for d in dets if d.frame_index in peaks and d.frame_index in poses]
    if not lifted:
        # every peak lacks a pose: fall back to the strongest posed detection
        posed = [d for d in dets if d.frame_index in poses]
        if not posed:
            return Prediction(query_id, Status.NO_DETECTION)
        best = max(posed, key=lambda d: d.confidence)
        lifted = [(lift_detection(best, poses.pose(best.frame_index), k), best.confidence)]
    obj = aggregate_prediction(lifted)
    return Prediction(query_id, Status.OK, obj, obj - query_pose.center, len(lifted))

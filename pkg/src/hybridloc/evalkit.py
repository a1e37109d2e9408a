"""VQ3D metric suite: Succ, Succ*, L2, Angle and QwP.

Definitions used here (the challenge's own thresholds are not public):

* a query *has a pose* when its query frame has a camera pose;
* it *succeeds* when it has a prediction with ``l2 <= tau_l2`` and
  ``angle <= tau_angle``;
* ``Succ = 100 * successes / total``, ``QwP = 100 * with_pose / total``,
  ``Succ* = 100 * successes / with_pose``.

Since success implies a pose, ``Succ = Succ* * QwP / 100`` holds exactly as
rational numbers. Percentages are stored as correctly rounded floats of
those rationals; the exact values are available as ``Fraction``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InvalidArgumentError, UndefinedAngleError
from .vq3d import Prediction, Status

COLUMNS = ("Succ%", "Succ*%", "L2", "Angle", "QwP%")


@dataclass(frozen=True)
class Thresholds:
    tau_l2: float = 6.0
    tau_angle: float = math.pi / 6

    def __post_init__(self):
        if not (self.tau_l2 > 0 and self.tau_angle > 0):
            raise InvalidArgumentError("success thresholds must be positive")


@dataclass(frozen=True)
class QueryRecord:
    query_id: int
    has_pose: bool
    has_prediction: bool
    success: bool
    l2_error: float | None = None
    angle_error: float | None = None

    def __post_init__(self):
        if self.success and not self.has_prediction or self.has_prediction and not self.has_pose:
            raise InvalidArgumentError("record violates success => prediction => pose")


@dataclass(frozen=True)
class MetricsReport:
    total: int
    with_pose: int
    with_prediction: int
    successes: int
    undefined_angles: int
    mean_l2: float | None
    mean_angle: float | None

    @property
    def succ_frac(self) -> Fraction:
        return Fraction(100 * self.successes, self.total)

    @property
    def qwp_frac(self) -> Fraction:
        return Fraction(100 * self.with_pose, self.total)

    @property
    def succ_star_frac(self) -> Fraction:
        return Fraction(100 * self.successes, self.with_pose) if self.with_pose else Fraction(0)

    @property
    def succ_pct(self) -> float:
        return float(self.succ_frac)

    @property
    def qwp_pct(self) -> float:
        return float(self.qwp_frac)

    @property
    def succ_star_pct(self) -> float:
        return float(self.succ_star_frac)

    def row(self) -> tuple[float, float, float | None, float | None, float]:
        """Metric values in table column order."""
        return (self.succ_pct, self.succ_star_pct, self.mean_l2, self.mean_angle, self.qwp_pct)

    def to_dict(self) -> dict:
        return {
            "succ_pct": self.succ_pct,
            "succ_star_pct": self.succ_star_pct,
            "mean_l2": self.mean_l2,
            "mean_angle": self.mean_angle,
            "qwp_pct": self.qwp_pct,
            "counts": {
                "total": self.total,
                "with_pose": self.with_pose,
                "with_prediction": self.with_prediction,
                "successes": self.successes,
                "undefined_angles": self.undefined_angles,
            },
        }


def l2_error(pred, gt) -> float:
    return float(np.linalg.norm(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)))


def angle_error(pred_disp, gt_disp) -> float:
    a = np.asarray(pred_disp, dtype=np.float64)
    b = np.asarray(gt_disp, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedAngleError("angle with a zero-length displacement is undefined")
    return float(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0)))


def evaluate_query(pred: Prediction, gt_object, gt_camera_center,
                   thr: Thresholds = Thresholds()) -> QueryRecord:
    has_pose = pred.status is not Status.NO_POSE
    if pred.status is not Status.OK:
        return QueryRecord(pred.query_id, has_pose, False, False)
    l2 = l2_error(pred.object_world, gt_object)
    gt_disp = np.asarray(gt_object, dtype=np.float64) - np.asarray(gt_camera_center, dtype=np.float64)
    try:
        ang = angle_error(pred.displacement, gt_disp)
    except UndefinedAngleError:
        ang = None
    success = ang is not None and l2 <= thr.tau_l2 and ang <= thr.tau_angle
    return QueryRecord(pred.query_id, True, True, success, l2, ang)


def _exact_mean(values) -> float | None:
    """Correctly rounded mean, independent of summation order."""
    if not values:
        return None
    return float(sum(map(Fraction, values)) / len(values))


def aggregate_metrics(records) -> MetricsReport:
    records = list(records)
    if not records:
        raise InvalidArgumentError("cannot aggregate an empty record list")
    l2s = [r.l2_error for r in records if r.l2_error is not None]
    angles = [r.angle_error for r in records if r.angle_error is not None]
    return MetricsReport(
        total=len(records),
        with_pose=sum(r.has_pose for r in records),
        with_prediction=sum(r.has_prediction for r in records),
        successes=sum(r.success for r in records),
        undefined_angles=sum(r.has_prediction and r.angle_error is None for r in records),
        mean_l2=_exact_mean(l2s),
        mean_angle=_exact_mean(angles),
    )


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.2f}"


def format_table(rows) -> str:
    """Fixed-width text table. ``rows`` are ``(name, values)`` with values in
    ``COLUMNS`` order (a MetricsReport is accepted in place of values)."""
    rows = [(name, vals.row() if isinstance(vals, MetricsReport) else tuple(vals)) for name, vals in rows]
    width = max([len("Method")] + [len(name) for name, _ in rows])
    lines = [f"{'Method':<{width}} | " + " ".join(f"{c:>8}" for c in COLUMNS)]
    lines.append("-" * len(lines[0]))
    for name, vals in rows:
        lines.append(f"{name:<{width}} | " + " ".join(f"{_fmt(v):>8}" for v in vals))
    return "\n".join(lines) + "\n"

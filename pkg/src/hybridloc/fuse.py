"""Bring SfM poses into the scan frame and merge them with relocalized poses."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentInfeasibleError, DegenerateGeometryError, InvalidArgumentError
from .geometry import PoseEntry, PoseTable, Provenance, Sim3, apply_sim3

# residual floor for the robust re-fit, so exact data is not trimmed on round-off
RESIDUAL_FLOOR = 1e-9


class Preference(str, enum.Enum):
    PREFER_SFM = "prefer-sfm"
    PREFER_PNP = "prefer-pnp"


@dataclass(frozen=True)
class UnionPolicy:
    preference: Preference = Preference.PREFER_SFM
    consistency_gate: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "preference", Preference(self.preference))
        if self.consistency_gate is not None and not self.consistency_gate > 0:
            raise InvalidArgumentError("consistency_gate must be positive when set")


@dataclass(eq=False)
class AlignmentReport:
    sim3: Sim3
    correspondences_used: int
    rms_center_residual: float
    residuals: dict[int, float] = field(default_factory=dict)
    excluded_frames: list[int] = field(default_factory=list)


def umeyama_sim3(src, dst) -> Sim3:
    """Least-squares similarity with ``dst ≈ s R src + t`` (Umeyama 1991)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    n = len(src)
    if n < 3 or len(dst) != n:
        raise DegenerateGeometryError(f"similarity alignment needs >= 3 paired points, got {n}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    A, B = src - mu_s, dst - mu_d
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[1] <= 1e-10 * max(sv[0], 1e-300):
        raise DegenerateGeometryError("source points are collinear")
    var_s = np.sum(A * A) / n
    U, S, Vt = np.linalg.svd(B.T @ A / n)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    R = U @ np.diag(D) @ Vt
    scale = float(S @ D / var_s)
    return Sim3(scale, R, mu_d - scale * R @ mu_s)


def align_sfm_to_scan(sfm: PoseTable, pnp: PoseTable) -> tuple[PoseTable, AlignmentReport]:
    """Fit the SfM-to-scan similarity on camera centers of shared frames.

    One robust pass: shared frames whose residual exceeds three times the
    median are dropped and the similarity is re-fit once.
    """
    shared = sorted(set(sfm) & set(pnp))
    if len(shared) < 3:
        raise AlignmentInfeasibleError(
            f"only {len(shared)} frames have both SfM and PnP poses; need at least 3")
    src, dst = sfm.centers(shared), pnp.centers(shared)
    try:
        sim = umeyama_sim3(src, dst)
    except DegenerateGeometryError as exc:
        raise AlignmentInfeasibleError(f"shared camera centers are degenerate: {exc}") from exc

    res = np.linalg.norm(sim.apply_points(src) - dst, axis=1)
    keep = res <= max(3.0 * float(np.median(res)), RESIDUAL_FLOOR)
    if keep.sum() >= 3 and not keep.all():
        try:
            sim = umeyama_sim3(src[keep], dst[keep])
        except DegenerateGeometryError:
            keep[:] = True
        res = np.linalg.norm(sim.apply_points(src) - dst, axis=1)
    else:
        keep[:] = True

    aligned = PoseTable({f: PoseEntry(apply_sim3(sim, e.pose), e.provenance) for f, e in sfm.items()})
    report = AlignmentReport(
        sim3=sim,
        correspondences_used=int(keep.sum()),
        rms_center_residual=float(np.sqrt(np.mean(res[keep] ** 2))),
        residuals={f: float(r) for f, r in zip(shared, res)},
        excluded_frames=[f for f, k in zip(shared, keep) if not k],
    )
    return aligned, report


def _interpolated_center(table: PoseTable, frame: int):
    """Center at ``frame`` linearly interpolated from its nearest neighbors in
    ``table`` (excluding the frame itself)."""
    frames = [f for f in table.frames() if f != frame]
    before = [f for f in frames if f < frame]
    after = [f for f in frames if f > frame]
    if before and after:
        a, b = before[-1], after[0]
        w = (frame - a) / (b - a)
        return (1 - w) * table.pose(a).center + w * table.pose(b).center
    if before:
        return table.pose(before[-1]).center
    if after:
        return table.pose(after[0]).center
    return None


def union_poses(aligned_sfm: PoseTable, pnp: PoseTable, policy: UnionPolicy = UnionPolicy()) -> PoseTable:
    """Union of two scan-frame pose tables.

    Frames present in one table are copied with a HYBRID provenance naming
    the source; frames present in both follow ``policy``.
    """
    if policy.preference is Preference.PREFER_SFM:
        pref, other = (aligned_sfm, Provenance.HYBRID_SFM), (pnp, Provenance.HYBRID_PNP)
    else:
        pref, other = (pnp, Provenance.HYBRID_PNP), (aligned_sfm, Provenance.HYBRID_SFM)
    out = {}
    for f in sorted(set(aligned_sfm) | set(pnp)):
        in_pref, in_other = f in pref[0], f in other[0]
        if in_pref and in_other and policy.consistency_gate is not None:
            guess = _interpolated_center(pref[0], f)
            if guess is not None and np.linalg.norm(pref[0].pose(f).center - guess) > policy.consistency_gate:
                out[f] = PoseEntry(other[0].pose(f), other[1])
                continue
        if in_pref:
            out[f] = PoseEntry(pref[0].pose(f), pref[1])
        else:
            out[f] = PoseEntry(other[0].pose(f), other[1])
    return PoseTable(out)

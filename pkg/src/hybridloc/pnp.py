"""Camera relocalization from 2D-3D matches: DLT PnP, Gauss-Newton
refinement and seeded RANSAC."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DegenerateGeometryError, InvalidArgumentError
from .geometry import Intrinsics, Pose, PoseTable, Provenance, nearest_rotation, so3_exp

log = logging.getLogger(__name__)

SAMPLE_SIZE = 6


class Correspondence2D3D(NamedTuple):
    pixel: np.ndarray
    point: np.ndarray
    point_id: int


@dataclass(frozen=True)
class RansacParams:
    max_iterations: int = 1000
    inlier_threshold: float = 2.0
    min_inliers: int = 12
    confidence: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1 or self.inlier_threshold <= 0:
            raise InvalidArgumentError("max_iterations >= 1 and inlier_threshold > 0 required")
        if self.min_inliers < SAMPLE_SIZE:
            raise InvalidArgumentError(f"min_inliers must be at least {SAMPLE_SIZE}")
        if not 0 < self.confidence < 1:
            raise InvalidArgumentError("confidence must lie in (0, 1)")


@dataclass
class RefineResult:
    pose: Pose
    cost: float
    initial_cost: float
    converged: bool
    costs: list[float] = field(default_factory=list)


class RansacResult(NamedTuple):
    pose: Pose
    inlier_ids: np.ndarray
    inlier_mask: np.ndarray


def stack_correspondences(corrs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """List of Correspondence2D3D -> (pixels (n, 2), points (n, 3), ids (n,))."""
    corrs = list(corrs)
    return (np.array([c.pixel for c in corrs], dtype=np.float64).reshape(-1, 2),
            np.array([c.point for c in corrs], dtype=np.float64).reshape(-1, 3),
            np.array([c.point_id for c in corrs]))


def solve_pnp_dlt(pixels, points, k: Intrinsics) -> Pose:
    """Linear PnP from at least 6 correspondences.

    Works in normalized image coordinates with the 3D points centered and
    scaled for conditioning. The left 3x3 block of the recovered projection
    is projected onto SO(3).
    """
    x = k.normalize(np.asarray(pixels, dtype=np.float64).reshape(-1, 2))
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(X)
    if n < SAMPLE_SIZE or len(x) != n:
        raise InvalidArgumentError(f"DLT needs >= {SAMPLE_SIZE} correspondences, got {n}")

    mu = X.mean(axis=0)
    scale = np.sqrt(3.0) / max(np.sqrt(((X - mu) ** 2).sum(axis=1)).mean(), 1e-300)
    Xn = np.hstack([(X - mu) * scale, np.ones((n, 1))])

    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xn
    A[0::2, 8:12] = -x[:, :1] * Xn
    A[1::2, 4:8] = Xn
    A[1::2, 8:12] = -x[:, 1:] * Xn
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    sv = np.zeros(12)
    sv[:len(s)] = s
    if sv[10] <= 1e-10 * sv[0]:
        raise DegenerateGeometryError("PnP design matrix is rank deficient (degenerate point layout)")
    P = Vt[-1].reshape(3, 4)

    # undo the 3D normalization: X_n = scale * (X - mu); P is defined up to sign
    M = P[:, :3] * scale
    if np.linalg.det(M) < 0:
        M = -M
    R = nearest_rotation(M)
    # re-solve the translation for the projected rotation (linear in t)
    RX = X @ R.T
    A_t = np.zeros((2 * n, 3))
    A_t[0::2, 0] = -1.0
    A_t[0::2, 2] = x[:, 0]
    A_t[1::2, 1] = -1.0
    A_t[1::2, 2] = x[:, 1]
    b_t = np.empty(2 * n)
    b_t[0::2] = RX[:, 0] - x[:, 0] * RX[:, 2]
    b_t[1::2] = RX[:, 1] - x[:, 1] * RX[:, 2]
    t = np.linalg.lstsq(A_t, b_t, rcond=None)[0]
    # cheirality: the majority of points must sit in front of the camera
    if np.sum((X @ R.T + t)[:, 2] > 0) < n / 2:
        raise DegenerateGeometryError("PnP solution places the points behind the camera")
    return Pose.from_world_to_camera(R, t)


def reprojection_residuals(pose: Pose, pixels, points, k: Intrinsics) -> np.ndarray:
    """Residual vector (2n,) of projected minus observed pixels."""
    xc = pose.to_camera(points)
    z = xc[:, 2]
    proj = np.stack([k.fx * xc[:, 0] / z + k.cx, k.fy * xc[:, 1] / z + k.cy], axis=1)
    return (proj - np.asarray(pixels)).ravel()


def reprojection_errors(pose: Pose, pixels, points, k: Intrinsics) -> np.ndarray:
    """Per-point reprojection error in pixels; inf for points behind the camera."""
    xc = pose.to_camera(points)
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = np.stack([k.fx * xc[:, 0] / z + k.cx, k.fy * xc[:, 1] / z + k.cy], axis=1)
        err = np.linalg.norm(proj - np.asarray(pixels), axis=1)
    return np.where(z > 0, err, np.inf)


def perturb_pose(pose: Pose, delta) -> Pose:
    """Apply a 6-vector local update ``[w, d]`` in the camera frame:
    ``x_cam' = exp(w) x_cam + d``."""
    delta = np.asarray(delta, dtype=np.float64)
    R_wc, t_wc = pose.world_to_camera()
    dR = so3_exp(delta[:3])
    return Pose.from_world_to_camera(nearest_rotation(dR @ R_wc), dR @ t_wc + delta[3:])


def pose_jacobian(pose: Pose, points, k: Intrinsics) -> np.ndarray:
    """Analytic Jacobian (2n, 6) of reprojection residuals w.r.t. the
    update of :func:`perturb_pose` at zero."""
    xc = pose.to_camera(points)
    x, y, z = xc.T
    n = len(xc)
    # d(pixel)/d(x_cam)
    Jp = np.zeros((n, 2, 3))
    Jp[:, 0, 0] = k.fx / z
    Jp[:, 0, 2] = -k.fx * x / z**2
    Jp[:, 1, 1] = k.fy / z
    Jp[:, 1, 2] = -k.fy * y / z**2
    # d(x_cam)/d[w, d] = [-[x_cam]_x, I]
    Jx = np.zeros((n, 3, 6))
    Jx[:, 0, 1], Jx[:, 0, 2] = z, -y
    Jx[:, 1, 0], Jx[:, 1, 2] = -z, x
    Jx[:, 2, 0], Jx[:, 2, 1] = y, -x
    Jx[:, :, 3:] = np.eye(3)
    return np.einsum("nij,njk->nik", Jp, Jx).reshape(2 * n, 6)


def refine_pose(initial: Pose, pixels, points, k: Intrinsics,
                max_iterations: int = 50, tol: float = 1e-14) -> RefineResult:
    """Damped Gauss-Newton on summed squared reprojection error.

    A step is accepted only if it lowers the cost; otherwise damping grows
    and the step is retried. The returned pose never has higher cost than
    ``initial``.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < SAMPLE_SIZE:
        raise InvalidArgumentError(f"refinement needs >= {SAMPLE_SIZE} points")

    def cost_of(p):
        r = reprojection_residuals(p, pixels, points, k)
        c = float(r @ r)
        return c if np.isfinite(c) and np.all(p.to_camera(points)[:, 2] > 0) else np.inf

    pose = initial
    cost = initial_cost = cost_of(pose)
    costs = [cost]
    lam = 1e-3
    converged = cost == 0.0
    for _ in range(max_iterations):
        if converged:
            break
        r = reprojection_residuals(pose, pixels, points, k)
        J = pose_jacobian(pose, points, k)
        H = J.T @ J
        g = J.T @ r
        improved = False
        while lam < 1e12:
            step = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
            cand = perturb_pose(pose, step)
            c = cost_of(cand)
            if c < cost:
                improved = True
                break
            lam *= 10.0
        if not improved:
            converged = True
            break
        rel = (cost - c) / cost
        pose, cost = cand, c
        costs.append(cost)
        lam = max(lam / 10.0, 1e-9)
        if rel < tol or cost < 1e-28 or np.linalg.norm(step) < 1e-15:
            converged = True
    if not converged:
        log.warning("pose refinement hit the iteration cap (cost %.3g)", cost)
    return RefineResult(pose, cost, initial_cost, converged, costs)


def _required_iterations(inlier_ratio: float, confidence: float) -> float:
    w = inlier_ratio ** SAMPLE_SIZE
    if w >= 1.0:
        return 1
    if w <= 0.0:
        return np.inf
    return np.log(1.0 - confidence) / np.log(1.0 - w)


def _score(pose, pixels, points, k, thr):
    err = reprojection_errors(pose, pixels, points, k)
    mask = err < thr
    return int(mask.sum()), float(err[mask].sum()), mask


def ransac_pnp(pixels, points, k: Intrinsics, params: RansacParams = RansacParams(),
               ids=None) -> RansacResult | None:
    """Robust PnP. Returns None when no hypothesis reaches ``min_inliers``."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    if n < SAMPLE_SIZE or n < params.min_inliers:
        return None

    # all samples are drawn up front so scoring order cannot influence them
    rng = np.random.default_rng(params.seed)
    samples = np.argpartition(rng.random((params.max_iterations, n)), SAMPLE_SIZE, axis=1)[:, :SAMPLE_SIZE]

    thr = params.inlier_threshold
    best = None  # (count, err_sum, mask)
    needed = np.inf
    for it, sample in enumerate(samples):
        if it >= needed:
            break
        try:
            hyp = solve_pnp_dlt(pixels[sample], points[sample], k)
        except DegenerateGeometryError:
            continue
        count, err_sum, mask = _score(hyp, pixels, points, k, thr)
        if best is None or count > best[0] or (count == best[0] and err_sum < best[1]):
            best = (count, err_sum, mask)
            # local optimization: re-fit linearly on the new consensus set
            if count >= SAMPLE_SIZE:
                try:
                    lo = _score(solve_pnp_dlt(pixels[mask], points[mask], k), pixels, points, k, thr)
                    if lo[0] > best[0] or (lo[0] == best[0] and lo[1] < best[1]):
                        best = lo
                except DegenerateGeometryError:
                    pass
            needed = _required_iterations(best[0] / n, params.confidence)

    if best is None or best[0] < params.min_inliers:
        return None

    mask = best[2]
    pose = None
    # fit on the consensus set, then re-select inliers once with the refined pose
    for _ in range(2):
        if mask.sum() < SAMPLE_SIZE:
            return None
        try:
            init = solve_pnp_dlt(pixels[mask], points[mask], k)
        except DegenerateGeometryError:
            if pose is None:
                return None
            init = pose
        if pose is not None and (reprojection_errors(pose, pixels[mask], points[mask], k) ** 2).sum() < \
                (reprojection_errors(init, pixels[mask], points[mask], k) ** 2).sum():
            init = pose
        pose = refine_pose(init, pixels[mask], points[mask], k).pose
        new_mask = reprojection_errors(pose, pixels, points, k) < thr
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    if mask.sum() < params.min_inliers:
        return None
    return RansacResult(pose, ids[mask], mask)


def frame_seed(seed: int, frame: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(frame)]).generate_state(1, np.uint64)[0])


def relocalize_frames(matches, keypoints, k: Intrinsics,
                      params: RansacParams = RansacParams()) -> PoseTable:
    """Run RANSAC PnP independently per frame.

    ``matches`` maps frame -> rows ``(point_id, u, v)``; ``keypoints`` maps
    point id -> 3D coordinates in the scan frame. Frames that fail are left
    out of the returned table.
    """
    poses = {}
    for frame in sorted(matches):
        rows = np.asarray(matches[frame], dtype=np.float64).reshape(-1, 3)
        known = np.array([int(pid) in keypoints for pid in rows[:, 0]], dtype=bool)
        rows = rows[known]
        if len(rows) == 0:
            continue
        pts = np.array([keypoints[int(pid)] for pid in rows[:, 0]])
        p = RansacParams(params.max_iterations, params.inlier_threshold, params.min_inliers,
                         params.confidence, frame_seed(params.seed, frame))
        res = ransac_pnp(rows[:, 1:3], pts, k, p, ids=rows[:, 0].astype(int))
        if res is None:
            log.info("frame %d: relocalization failed", frame)
            continue
        poses[int(frame)] = res.pose
    return PoseTable.from_poses(poses, Provenance.PNP)

"""Minimal incremental structure-from-motion.

Two-view bootstrap (8-point essential matrix + chirality), PnP
registration of further frames against the landmark map, DLT
triangulation of new tracks and Levenberg-Marquardt bundle adjustment
with a Huber loss. The reconstruction lives in an arbitrary similarity
frame fixed by the bootstrap pair.
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import DegenerateGeometryError, EmptyReconstructionError, InvalidArgumentError
from .geometry import Intrinsics, Pose, PoseTable, Provenance, nearest_rotation, so3_exp
from .pnp import RansacParams, frame_seed, ransac_pnp

log = logging.getLogger(__name__)

_W = np.array([[0.0, -1.0, 0.0],
               [1.0, 0.0, 0.0],
               [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class BaParams:
    max_iterations: int = 100
    initial_lambda: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    rel_tol: float = 1e-12
    huber_delta: float = 2.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")
        if min(self.initial_lambda, self.lambda_up, self.lambda_down,
               self.rel_tol, self.huber_delta) <= 0:
            raise InvalidArgumentError("BA parameters must be positive")


@dataclass(frozen=True)
class SfmParams:
    ba: BaParams = BaParams()
    ransac: RansacParams = RansacParams()
    min_triangulation_angle_deg: float = 1.0
    max_bootstrap_attempts: int = 10


@dataclass(eq=False)
class ReconstructionMap:
    poses: PoseTable
    landmarks: dict[int, np.ndarray]
    # rows (frame, point_id, u, v)
    observations: np.ndarray
    # (fully fixed frame, frame whose distance to it fixes the scale)
    gauge: tuple[int, int] = (0, 1)
    # accepted-cost sequence of every bundle adjustment run while building
    ba_history: list[list[float]] = field(default_factory=list)

    def rms_reprojection(self, k: Intrinsics) -> float:
        if len(self.observations) == 0:
            return 0.0
        r = BundleProblem(self, k).residuals()
        return float(np.sqrt(np.mean(r.reshape(-1, 2) ** 2 @ np.ones(2))))


# ---------------------------------------------------------------- two-view

def estimate_essential(x1, x2) -> np.ndarray:
    """8-point essential matrix from normalized coordinates, ``x2^T E x1 = 0``.

    Result has two equal singular values, rank 2 and unit Frobenius norm.
    """
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    n = len(x1)
    if n < 8 or len(x2) != n:
        raise InvalidArgumentError(f"8-point algorithm needs >= 8 pairs, got {n}")
    h1 = np.hstack([x1, np.ones((n, 1))])
    h2 = np.hstack([x2, np.ones((n, 1))])
    A = (h2[:, :, None] * h1[:, None, :]).reshape(n, 9)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    sv = np.zeros(9)
    sv[:len(s)] = s
    if sv[7] <= 1e-9 * sv[0]:
        raise DegenerateGeometryError("essential matrix is not determined (zero baseline or degenerate points)")
    E = Vt[-1].reshape(3, 3)
    U, S, Vt = np.linalg.svd(E)
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
    return E / np.linalg.norm(E)


def _triangulate_normalized(R, t, x1, x2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Triangulate normalized pairs with camera 1 at the origin and camera 2
    mapping ``x_2 = R x_1 + t``. Returns points in camera-1 frame, depth in
    cam 1 and depth in cam 2."""
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t.reshape(3, 1)])
    pts = np.empty((len(x1), 3))
    for i, (a, b) in enumerate(zip(x1, x2)):
        A = np.stack([a[0] * P1[2] - P1[0], a[1] * P1[2] - P1[1],
                      b[0] * P2[2] - P2[0], b[1] * P2[2] - P2[1]])
        X = np.linalg.svd(A)[2][-1]
        pts[i] = X[:3] / X[3] if X[3] != 0 else np.full(3, np.nan)
    z1 = pts[:, 2]
    z2 = (pts @ R.T + t)[:, 2]
    return pts, z1, z2


def decompose_essential(e, px1, px2, k: Intrinsics) -> Pose:
    """Recover the relative pose of camera 2 from an essential matrix.

    Of the four factorizations the one placing a strict majority of the
    triangulated pairs in front of both cameras wins. The result is the
    camera-to-world pose of camera 2 expressed in camera 1's frame, with a
    unit-length baseline.
    """
    x1 = k.normalize(np.asarray(px1, dtype=np.float64).reshape(-1, 2))
    x2 = k.normalize(np.asarray(px2, dtype=np.float64).reshape(-1, 2))
    if len(x1) < 1 or len(x1) != len(x2):
        raise InvalidArgumentError("need at least one correspondence")
    U, _, Vt = np.linalg.svd(np.asarray(e, dtype=np.float64))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    t = U[:, 2]
    candidates = [(U @ _W @ Vt, t), (U @ _W @ Vt, -t), (U @ _W.T @ Vt, t), (U @ _W.T @ Vt, -t)]
    counts = []
    for R, tc in candidates:
        _, z1, z2 = _triangulate_normalized(R, tc, x1, x2)
        counts.append(int(np.sum((z1 > 0) & (z2 > 0))))
    order = np.argsort(counts)[::-1]
    best = order[0]
    n = len(x1)
    if counts[best] * 2 <= n or counts[order[1]] == counts[best]:
        raise DegenerateGeometryError(f"no essential factorization satisfies chirality (counts {counts})")
    R, tc = candidates[best]
    return Pose.from_world_to_camera(nearest_rotation(R), tc / np.linalg.norm(tc))


def triangulate(pose_a: Pose, pose_b: Pose, k: Intrinsics, px_a, px_b) -> np.ndarray:
    """Linear two-view triangulation (DLT, normalized coordinates)."""
    if np.linalg.norm(pose_a.center - pose_b.center) < 1e-12:
        raise DegenerateGeometryError("camera centers coincide")
    rows = []
    for pose, px in ((pose_a, px_a), (pose_b, px_b)):
        R_wc, t_wc = pose.world_to_camera()
        P = np.hstack([R_wc, t_wc.reshape(3, 1)])
        x, y = k.normalize(np.asarray(px, dtype=np.float64))
        rows += [x * P[2] - P[0], y * P[2] - P[1]]
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, s, Vt = np.linalg.svd(A)
    X = Vt[-1]
    if abs(X[3]) <= 1e-12 * np.linalg.norm(X[:3]) or s[2] <= 1e-14 * s[0]:
        raise DegenerateGeometryError("rays are parallel; point at infinity")
    return X[:3] / X[3]


def _ray_angle(pose_a: Pose, pose_b: Pose, X) -> float:
    a = X - pose_a.center
    b = X - pose_b.center
    c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# ---------------------------------------------------------------- bundle adjustment

def huber_cost(sq_norms, delta: float) -> float:
    e = np.sqrt(sq_norms)
    return float(np.sum(np.where(e <= delta, sq_norms, 2.0 * delta * e - delta**2)))


class BundleProblem:
    """Reprojection residuals of a map with a local update parameterization.

    Parameter blocks, in order: per non-gauge frame ``[w (3), dc (3)]``
    (``dc`` has 2 entries for the scale-gauge frame, a tangent step on the
    sphere around the fixed frame's center), then ``dX (3)`` per landmark.
    Camera-to-world rotations update as ``R exp(w)``.
    """

    def __init__(self, rmap: ReconstructionMap, k: Intrinsics):
        self.k = k
        self.frames = rmap.poses.frames()
        self.poses = {f: rmap.poses.pose(f) for f in self.frames}
        self.point_ids = sorted(rmap.landmarks)
        self.X = np.array([rmap.landmarks[p] for p in self.point_ids]).reshape(-1, 3)
        self.g0, self.g1 = rmap.gauge
        obs = np.asarray(rmap.observations, dtype=np.float64).reshape(-1, 4)
        self.obs = obs
        fidx = {f: i for i, f in enumerate(self.frames)}
        pidx = {p: i for i, p in enumerate(self.point_ids)}
        self.obs_f = np.array([fidx[int(f)] for f in obs[:, 0]], dtype=int)
        self.obs_p = np.array([pidx[int(p)] for p in obs[:, 1]], dtype=int)
        self.pixels = obs[:, 2:4]

        # parameter layout
        self.pose_slot = {}
        off = 0
        for f in self.frames:
            if f == self.g0:
                continue
            width = 5 if f == self.g1 else 6
            self.pose_slot[f] = (off, width)
            off += width
        self.point_offset = off
        self.n_params = off + 3 * len(self.point_ids)
        if self.g1 in self.poses and self.g0 in self.poses:
            v = self.poses[self.g1].center - self.poses[self.g0].center
            self.gauge_radius = float(np.linalg.norm(v))
            self.tangent = self._tangent_basis(v / self.gauge_radius)

    @staticmethod
    def _tangent_basis(u) -> np.ndarray:
        a = np.eye(3)[np.argmin(np.abs(u))]
        b1 = np.cross(u, a)
        b1 /= np.linalg.norm(b1)
        return np.column_stack([b1, np.cross(u, b1)])

    def _camera(self):
        Rs = np.array([self.poses[f].rotation for f in self.frames]).reshape(-1, 3, 3)
        cs = np.array([self.poses[f].center for f in self.frames]).reshape(-1, 3)
        return Rs, cs

    def _project(self, Rs, cs, X):
        Ro = Rs[self.obs_f]
        d = X[self.obs_p] - cs[self.obs_f]
        xc = np.einsum("nji,nj->ni", Ro, d)
        return xc

    def residuals(self) -> np.ndarray:
        Rs, cs = self._camera()
        xc = self._project(Rs, cs, self.X)
        k = self.k
        u = k.fx * xc[:, 0] / xc[:, 2] + k.cx
        v = k.fy * xc[:, 1] / xc[:, 2] + k.cy
        return (np.stack([u, v], axis=1) - self.pixels).ravel()

    def depths(self) -> np.ndarray:
        Rs, cs = self._camera()
        return self._project(Rs, cs, self.X)[:, 2]

    def jacobian_blocks(self) -> tuple[sp.csr_matrix, np.ndarray]:
        """Pose part of the Jacobian as a sparse (2n, n_pose_params) matrix and
        the landmark part as per-observation (n, 2, 3) blocks."""
        Rs, cs = self._camera()
        xc = self._project(Rs, cs, self.X)
        x, y, z = xc.T
        n = len(xc)
        k = self.k
        Jp = np.zeros((n, 2, 3))
        Jp[:, 0, 0] = k.fx / z
        Jp[:, 0, 2] = -k.fx * x / z**2
        Jp[:, 1, 1] = k.fy / z
        Jp[:, 1, 2] = -k.fy * y / z**2
        Rt = np.transpose(Rs[self.obs_f], (0, 2, 1))
        # d(x_cam)/dw = [x_cam]_x for R <- R exp(w)
        Sx = np.zeros((n, 3, 3))
        Sx[:, 0, 1], Sx[:, 0, 2] = -z, y
        Sx[:, 1, 0], Sx[:, 1, 2] = z, -x
        Sx[:, 2, 0], Sx[:, 2, 1] = -y, x
        J_w = Jp @ Sx
        J_X = Jp @ Rt
        J_c = -J_X

        rows, cols, vals = [], [], []
        r_idx = np.stack([2 * np.arange(n), 2 * np.arange(n) + 1], axis=1)
        for f, (off, width) in self.pose_slot.items():
            sel = np.flatnonzero(self.obs_f == self.frames.index(f))
            if len(sel) == 0:
                continue
            if width == 6:
                block = np.concatenate([J_w[sel], J_c[sel]], axis=2)
            else:
                block = np.concatenate([J_w[sel], J_c[sel] @ self.tangent], axis=2)
            rr = np.repeat(r_idx[sel][:, :, None], width, axis=2)
            cc = np.broadcast_to(off + np.arange(width), rr.shape)
            rows.append(rr.ravel()); cols.append(cc.ravel()); vals.append(block.ravel())
        if rows:
            J_pose = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                   shape=(2 * n, self.point_offset))
        else:
            J_pose = sp.csr_matrix((2 * n, self.point_offset))
        return J_pose, J_X

    def jacobian(self) -> sp.csr_matrix:
        J_pose, J_X = self.jacobian_blocks()
        n = len(J_X)
        rr = np.repeat(np.stack([2 * np.arange(n), 2 * np.arange(n) + 1], axis=1)[:, :, None], 3, axis=2)
        cc = np.broadcast_to(3 * self.obs_p[:, None, None] + np.arange(3)[None, None, :], rr.shape)
        J_pts = sp.csr_matrix((J_X.ravel(), (rr.ravel(), cc.ravel())),
                              shape=(2 * n, 3 * len(self.point_ids)))
        return sp.hstack([J_pose, J_pts]).tocsr()

    def retract(self, delta) -> "BundleProblem":
        """Return a copy with the local update ``delta`` applied."""
        delta = np.asarray(delta, dtype=np.float64)
        new = object.__new__(BundleProblem)
        new.__dict__.update(self.__dict__)
        new.poses = dict(self.poses)
        for f, (off, width) in self.pose_slot.items():
            p = self.poses[f]
            w = delta[off:off + 3]
            R = nearest_rotation(p.rotation @ so3_exp(w))
            if width == 6:
                c = p.center + delta[off + 3:off + 6]
            else:
                c0 = self.poses[self.g0].center
                v = p.center - c0 + self.tangent @ delta[off + 3:off + 5]
                c = c0 + self.gauge_radius * v / np.linalg.norm(v)
            new.poses[f] = Pose(R, c)
        new.X = self.X + delta[self.point_offset:].reshape(-1, 3)
        if self.g1 in self.pose_slot:
            v = new.poses[self.g1].center - new.poses[self.g0].center
            new.tangent = self._tangent_basis(v / np.linalg.norm(v))
        return new

    def to_map(self, template: ReconstructionMap) -> ReconstructionMap:
        table = PoseTable({f: (self.poses[f], template.poses[f].provenance) for f in self.frames})
        lms = {p: self.X[i].copy() for i, p in enumerate(self.point_ids)}
        return ReconstructionMap(table, lms, template.observations.copy(), template.gauge)


def _normal_equations(prob: BundleProblem, w, r):
    """Weighted Gauss-Newton blocks: pose/pose (dense), pose/point (dense),
    point/point (3x3 per landmark) and both gradient parts."""
    J_pose, J_X = prob.jacobian_blocks()
    n_pts = len(prob.point_ids)
    wr = np.repeat(w, 2)
    r = r.reshape(-1, 2)
    JtW = J_pose.T.multiply(wr).tocsr()
    Hcc = (JtW @ J_pose).toarray()
    gc = JtW @ r.ravel()
    n = len(J_X)
    rr = np.repeat(np.stack([2 * np.arange(n), 2 * np.arange(n) + 1], axis=1)[:, :, None], 3, axis=2)
    cc = np.broadcast_to(3 * prob.obs_p[:, None, None] + np.arange(3)[None, None, :], rr.shape)
    J_pts = sp.csr_matrix((J_X.ravel(), (rr.ravel(), cc.ravel())), shape=(2 * n, 3 * n_pts))
    Hcp = (JtW @ J_pts).toarray()
    Hpp = np.zeros((n_pts, 3, 3))
    np.add.at(Hpp, prob.obs_p, w[:, None, None] * np.einsum("nki,nkj->nij", J_X, J_X))
    gp = np.zeros((n_pts, 3))
    np.add.at(gp, prob.obs_p, w[:, None] * np.einsum("nki,nk->ni", J_X, r))
    return Hcc, Hcp, Hpp, gc, gp


def _solve_damped(normal, lam: float) -> np.ndarray:
    """Solve the LM system by eliminating the landmarks (Schur complement)."""
    Hcc, Hcp, Hpp, gc, gp = normal
    n_pts = len(Hpp)
    Hcc = Hcc + np.diag(lam * np.diag(Hcc) + 1e-12 * lam)
    idx = np.arange(3)
    Hpp = Hpp.copy()
    Hpp[:, idx, idx] += lam * Hpp[:, idx, idx] + 1e-12 * lam
    if np.any(np.linalg.det(Hpp) <= 0):
        raise LinAlgError("landmark block not positive definite")
    Cinv = np.linalg.inv(Hpp)
    B = Hcp.reshape(len(Hcc), n_pts, 3)
    BCinv = np.einsum("cpi,pij->cpj", B, Cinv).reshape(len(Hcc), 3 * n_pts)
    if len(Hcc):
        S = Hcc - BCinv @ Hcp.T
        rhs = -gc + BCinv @ gp.ravel()
        dc = cho_solve(cho_factor(S), rhs)
    else:
        dc = np.zeros(0)
    dp = np.einsum("pij,pj->pi", Cinv, -gp - (Hcp.T @ dc).reshape(n_pts, 3))
    return np.concatenate([dc, dp.ravel()])


def bundle_adjust(rmap: ReconstructionMap, k: Intrinsics, params: BaParams = BaParams(),
                  history: list | None = None) -> ReconstructionMap:
    """Levenberg-Marquardt on the Huber-robustified reprojection error.

    The gauge frame ``rmap.gauge[0]`` is held fixed and the distance from it
    to ``rmap.gauge[1]`` is preserved. Only steps that strictly lower the
    robust cost are accepted; accepted costs are appended to ``history``.
    """
    prob = BundleProblem(rmap, k)
    if prob.n_params == 0 or len(prob.obs) == 0:
        return rmap
    delta = params.huber_delta

    def robust(problem):
        r = problem.residuals().reshape(-1, 2)
        sq = np.sum(r * r, axis=1)
        if not np.all(np.isfinite(sq)) or np.any(problem.depths() <= 0):
            return np.inf, r, sq
        return huber_cost(sq, delta), r, sq

    cost, r, sq = robust(prob)
    if history is not None:
        history.append(cost)
    lam = params.initial_lambda
    for _ in range(params.max_iterations):
        if cost == 0.0:
            break
        e = np.sqrt(sq)
        w = np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-300))
        normal = _normal_equations(prob, w, r)
        accepted = False
        while lam <= 1e16:
            try:
                step = _solve_damped(normal, lam)
            except LinAlgError:
                lam *= params.lambda_up
                continue
            cand = prob.retract(step)
            c_cost, c_r, c_sq = robust(cand)
            if c_cost < cost:
                accepted = True
                break
            lam *= params.lambda_up
        if not accepted:
            break
        rel = (cost - c_cost) / cost
        prob, cost, r, sq = cand, c_cost, c_r, c_sq
        if history is not None:
            history.append(cost)
        lam = max(lam * params.lambda_down, 1e-12)
        if rel < params.rel_tol:
            break
    return prob.to_map(rmap)


# ---------------------------------------------------------------- incremental driver

class _Tracks:
    def __init__(self, observations):
        obs = np.asarray(observations, dtype=np.float64).reshape(-1, 4)
        self.by_frame: dict[int, dict[int, np.ndarray]] = defaultdict(dict)
        for f, p, u, v in obs:
            self.by_frame[int(f)][int(p)] = np.array([u, v])
        self.frames = sorted(self.by_frame)


def _select_pairs(tracks: _Tracks, k: Intrinsics) -> list[tuple[float, int, int]]:
    """Frame pairs ranked by shared-track count times median parallax."""
    scored = []
    frames = tracks.frames
    for i, a in enumerate(frames):
        obs_a = tracks.by_frame[a]
        for b in frames[i + 1:]:
            obs_b = tracks.by_frame[b]
            shared = sorted(obs_a.keys() & obs_b.keys())
            if len(shared) < 8:
                continue
            disp = np.linalg.norm(np.array([obs_a[p] - obs_b[p] for p in shared]), axis=1)
            scored.append((len(shared) * float(np.median(disp)), a, b))
    scored.sort(key=lambda s: (-s[0], s[1], s[2]))
    return scored


class _Builder:
    def __init__(self, tracks: _Tracks, k: Intrinsics, params: SfmParams):
        self.tracks = tracks
        self.k = k
        self.params = params
        self.poses: dict[int, Pose] = {}
        self.landmarks: dict[int, np.ndarray] = {}
        self.obs: dict[tuple[int, int], np.ndarray] = {}
        self.gauge = (0, 1)
        self.ba_history: list[list[float]] = []
        self.gate = 2.0 * params.ransac.inlier_threshold
        self.min_angle = np.deg2rad(params.min_triangulation_angle_deg)

    def _err(self, f: int, pid: int, X) -> float:
        xc = self.poses[f].to_camera(X)
        if xc[2] <= 0:
            return np.inf
        px = np.array([self.k.fx * xc[0] / xc[2] + self.k.cx, self.k.fy * xc[1] / xc[2] + self.k.cy])
        return float(np.linalg.norm(px - self.tracks.by_frame[f][pid]))

    def bootstrap(self) -> None:
        for _, a, b in _select_pairs(self.tracks, self.k)[:self.params.max_bootstrap_attempts]:
            oa, ob = self.tracks.by_frame[a], self.tracks.by_frame[b]
            shared = sorted(oa.keys() & ob.keys())
            pa = np.array([oa[p] for p in shared])
            pb = np.array([ob[p] for p in shared])
            try:
                E = estimate_essential(self.k.normalize(pa), self.k.normalize(pb))
                rel = decompose_essential(E, pa, pb, self.k)
            except DegenerateGeometryError as exc:
                log.info("bootstrap pair (%d, %d) rejected: %s", a, b, exc)
                continue
            self.poses = {a: Pose.identity(), b: rel}
            self.landmarks, self.obs = {}, {}
            for pid in shared:
                self._try_add_landmark(pid, a, b)
            if len(self.landmarks) >= 8:
                self.gauge = (a, b)
                log.info("bootstrapped from frames (%d, %d) with %d landmarks", a, b, len(self.landmarks))
                return
        raise EmptyReconstructionError("no frame pair supports a two-view bootstrap")

    def _try_add_landmark(self, pid: int, f: int, g: int) -> bool:
        px_f = self.tracks.by_frame[f][pid]
        px_g = self.tracks.by_frame[g][pid]
        try:
            X = triangulate(self.poses[f], self.poses[g], self.k, px_f, px_g)
        except DegenerateGeometryError:
            return False
        if _ray_angle(self.poses[f], self.poses[g], X) < self.min_angle:
            return False
        if self._err(f, pid, X) > self.gate or self._err(g, pid, X) > self.gate:
            return False
        self.landmarks[pid] = X
        for h in self.poses:
            if pid in self.tracks.by_frame[h] and self._err(h, pid, X) <= self.gate:
                self.obs[(h, pid)] = self.tracks.by_frame[h][pid]
        return True

    def register(self, f: int) -> bool:
        seen = [p for p in self.tracks.by_frame[f] if p in self.landmarks]
        if len(seen) < self.params.ransac.min_inliers:
            return False
        px = np.array([self.tracks.by_frame[f][p] for p in seen])
        pts = np.array([self.landmarks[p] for p in seen])
        rp = self.params.ransac
        rp = RansacParams(rp.max_iterations, rp.inlier_threshold, rp.min_inliers,
                          rp.confidence, frame_seed(rp.seed, f))
        res = ransac_pnp(px, pts, self.k, rp, ids=np.array(seen))
        if res is None:
            return False
        self.poses[f] = res.pose
        for pid in res.inlier_ids:
            self.obs[(f, int(pid))] = self.tracks.by_frame[f][int(pid)]
        # new tracks: pair f with the registered frame giving the widest ray angle
        for pid in self.tracks.by_frame[f]:
            if pid in self.landmarks:
                continue
            others = [g for g in self.poses if g != f and pid in self.tracks.by_frame[g]]
            if not others:
                continue
            best_g, best_angle = None, -1.0
            for g in others:
                try:
                    X = triangulate(self.poses[f], self.poses[g], self.k,
                                    self.tracks.by_frame[f][pid], self.tracks.by_frame[g][pid])
                except DegenerateGeometryError:
                    continue
                ang = _ray_angle(self.poses[f], self.poses[g], X)
                if ang > best_angle:
                    best_g, best_angle = g, ang
            if best_g is not None:
                self._try_add_landmark(pid, f, best_g)
        return True

    def current_map(self) -> ReconstructionMap:
        keys = sorted(self.obs)
        rows = np.array([(f, p, *self.obs[(f, p)]) for f, p in keys], dtype=np.float64).reshape(-1, 4)
        return ReconstructionMap(PoseTable.from_poses(self.poses, Provenance.SFM),
                                 dict(sorted(self.landmarks.items())), rows, self.gauge)

    def adjust(self) -> None:
        hist: list[float] = []
        rmap = bundle_adjust(self.current_map(), self.k, self.params.ba, history=hist)
        self.ba_history.append(hist)
        self.poses = {f: rmap.poses.pose(f) for f in rmap.poses}
        self.landmarks = dict(rmap.landmarks)
        self.prune()

    def prune(self) -> None:
        limit = 3.0 * self.params.ba.huber_delta
        bad = set()
        for (f, pid) in self.obs:
            X = self.landmarks.get(pid)
            if X is None:
                continue
            xc = self.poses[f].to_camera(X)
            if xc[2] <= 0 or self._err(f, pid, X) > limit:
                bad.add(pid)
        # a landmark needs two views to stay constrained
        views = defaultdict(int)
        for (f, pid) in self.obs:
            views[pid] += 1
        bad |= {p for p in self.landmarks if views[p] < 2}
        if bad:
            log.info("pruning %d landmarks", len(bad))
        for pid in bad:
            self.landmarks.pop(pid, None)
        self.obs = {key: px for key, px in self.obs.items() if key[1] in self.landmarks}


def run_incremental_sfm(observations, k: Intrinsics, params: SfmParams = SfmParams(),
                        n_frames: int | None = None) -> ReconstructionMap:
    """Reconstruct camera poses and landmarks from feature tracks.

    ``observations`` rows are ``(frame, point_id, u, v)`` (extra columns are
    ignored). Frames that cannot be registered are absent from the result.
    """
    obs = np.asarray(observations, dtype=np.float64)
    obs = obs[:, :4] if obs.size else obs.reshape(0, 4)
    tracks = _Tracks(obs)
    if len(tracks.frames) < 2:
        raise EmptyReconstructionError("need at least two frames with observations")
    n_total = n_frames if n_frames is not None else (max(tracks.frames) + 1)
    ba_every = max(1, math.ceil(n_total / 5))

    b = _Builder(tracks, k, params)
    b.bootstrap()
    b.adjust()

    failed: set[int] = set()
    since_ba = 0
    while True:
        todo = [f for f in tracks.frames if f not in b.poses and f not in failed]
        if not todo:
            break
        visible = {f: sum(p in b.landmarks for p in tracks.by_frame[f]) for f in todo}
        f = max(todo, key=lambda fr: (visible[fr], -fr))
        if b.register(f):
            failed.clear()
            since_ba += 1
            if since_ba >= ba_every:
                b.adjust()
                since_ba = 0
        else:
            log.info("frame %d could not be registered", f)
            failed.add(f)
    b.adjust()
    rmap = b.current_map()
    rmap.ba_history = b.ba_history
    log.info("registered %d of %d frames, %d landmarks", len(rmap.poses), len(tracks.frames), len(rmap.landmarks))
    return rmap

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridloc.errors import AlignmentInfeasibleError, DegenerateGeometryError, InvalidArgumentError
from hybridloc.fuse import Preference, UnionPolicy, align_sfm_to_scan, umeyama_sim3, union_poses
from hybridloc.geometry import Pose, PoseTable, Provenance, apply_sim3, rotation_angle
from hybridloc.minisfm import run_incremental_sfm
from hybridloc.pnp import relocalize_frames
from hybridloc.synthworld import NoiseSpec, render_tracks

from conftest import random_pose, random_sim3


def table(poses, prov=Provenance.SFM):
    return PoseTable.from_poses(poses, prov)


def gt_table(scene, frames, prov=Provenance.PNP):
    return table({f: scene.trajectory[f] for f in frames}, prov)


def sfm_like(scene, frames, sim):
    """Ground-truth poses carried into an arbitrary similarity frame."""
    return table({f: apply_sim3(sim, scene.trajectory[f]) for f in frames})


# ---- umeyama

def test_umeyama_identity():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    s = umeyama_sim3(pts, pts)
    assert s.scale == pytest.approx(1, abs=1e-12)
    np.testing.assert_allclose(s.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(s.translation, 0, atol=1e-12)


def test_umeyama_pure_scale():
    pts = np.random.default_rng(1).normal(size=(10, 3))
    s = umeyama_sim3(pts, 2 * pts)
    assert s.scale == pytest.approx(2, abs=1e-12)
    np.testing.assert_allclose(s.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(s.translation, 0, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_umeyama_recovers_random_similarity(seed):
    rng = np.random.default_rng(seed)
    truth = random_sim3(rng)
    src = rng.normal(size=(50, 3)) * 3
    est = umeyama_sim3(src, truth.apply_points(src))
    assert abs(est.scale - truth.scale) < 1e-9
    assert np.abs(est.rotation - truth.rotation).max() < 1e-9
    assert np.abs(est.translation - truth.translation).max() < 1e-9


def test_umeyama_noise_residual_matches_sigma():
    rng = np.random.default_rng(2)
    truth = random_sim3(rng)
    src = rng.normal(size=(4000, 3)) * 5
    sigma = 0.05
    dst = truth.apply_points(src) + rng.normal(0, sigma, src.shape)
    est = umeyama_sim3(src, dst)
    rms = np.sqrt(np.mean((est.apply_points(src) - dst) ** 2))
    assert rms == pytest.approx(sigma, rel=0.05)


def test_umeyama_handles_reflection_request():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(20, 3))
    dst = src * np.array([1, 1, -1])
    s = umeyama_sim3(src, dst)
    assert np.linalg.det(s.rotation) == pytest.approx(1.0)


def test_umeyama_degenerate_inputs():
    with pytest.raises(DegenerateGeometryError):
        umeyama_sim3(np.eye(3)[:2], np.eye(3)[:2])
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateGeometryError):
        umeyama_sim3(line, line)


# ---- alignment

def test_align_zero_noise(scene):
    rng = np.random.default_rng(4)
    sim = random_sim3(rng)
    sfm = sfm_like(scene, range(20), sim)
    aligned, rep = align_sfm_to_scan(sfm, gt_table(scene, range(0, 20, 2)))
    assert rep.correspondences_used == 10 and rep.rms_center_residual < 1e-6
    for f, e in aligned.items():
        assert e.provenance is Provenance.SFM
        np.testing.assert_allclose(e.pose.center, scene.trajectory[f].center, atol=1e-6)
        assert rotation_angle(e.pose.rotation, scene.trajectory[f].rotation) < 1e-9
    assert all(r >= 0 for r in rep.residuals.values())


def test_align_two_shared_infeasible(scene):
    with pytest.raises(AlignmentInfeasibleError):
        align_sfm_to_scan(gt_table(scene, [0, 1, 2], Provenance.SFM), gt_table(scene, [1, 2, 3]))


def test_align_collinear_infeasible():
    poses = {f: Pose(np.eye(3), [f, 0, 0]) for f in range(5)}
    with pytest.raises(AlignmentInfeasibleError):
        align_sfm_to_scan(table(poses), table(poses, Provenance.PNP))


def test_align_robust_refit_drops_corrupted(scene):
    sim = random_sim3(np.random.default_rng(5))
    sfm = sfm_like(scene, range(10), sim)
    pnp = {f: scene.trajectory[f] for f in range(10)}
    pnp[6] = Pose(pnp[6].rotation, pnp[6].center + [3.0, -2.0, 1.0])
    aligned, rep = align_sfm_to_scan(sfm, table(pnp, Provenance.PNP))
    assert rep.excluded_frames == [6]
    assert rep.correspondences_used == 9 and rep.rms_center_residual < 1e-6
    np.testing.assert_allclose(aligned.pose(3).center, scene.trajectory[3].center, atol=1e-6)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30)
def test_align_idempotent(seed):
    rng = np.random.default_rng(seed)
    t = table({f: random_pose(rng) for f in range(6)}, Provenance.PNP)
    _, rep = align_sfm_to_scan(t, t)
    assert abs(rep.sim3.scale - 1) < 1e-9
    assert np.abs(rep.sim3.rotation - np.eye(3)).max() < 1e-9
    assert np.abs(rep.sim3.translation).max() < 1e-9


# ---- union

def test_union_policy_validation():
    with pytest.raises(InvalidArgumentError):
        UnionPolicy(consistency_gate=0.0)
    assert UnionPolicy("prefer-pnp").preference is Preference.PREFER_PNP


@pytest.mark.parametrize("pref", list(Preference))
def test_union_overlapping_domains(pref):
    rng = np.random.default_rng(6)
    sfm = table({f: random_pose(rng) for f in range(5)})
    pnp = table({f: random_pose(rng) for f in range(3, 10)}, Provenance.PNP)
    out = union_poses(sfm, pnp, UnionPolicy(pref))
    assert out.frames() == list(range(10))
    winner, prov = (sfm, "HYBRID-SFM") if pref is Preference.PREFER_SFM else (pnp, "HYBRID-PNP")
    for f in (3, 4):
        assert out[f].pose is winner.pose(f) and out[f].provenance.value == prov
    assert out[0].provenance is Provenance.HYBRID_SFM and out[9].provenance is Provenance.HYBRID_PNP
    assert len(out) >= max(len(sfm), len(pnp))


def test_union_with_empty_input(scene):
    t = gt_table(scene, range(5))
    out = union_poses(PoseTable(), t)
    assert out.frames() == t.frames()
    assert all(out.pose(f) is t.pose(f) for f in t)
    assert union_poses(t, PoseTable()).frames() == t.frames()


@given(st.sets(st.integers(0, 19)), st.sets(st.integers(0, 19)))
@settings(max_examples=60)
def test_union_coverage_and_policy_flip(a, b):
    p = Pose.identity()
    q = Pose(np.eye(3), [1.0, 0, 0])
    sa, sb = table({f: p for f in a}), table({f: q for f in b}, Provenance.PNP)
    u1 = union_poses(sa, sb, UnionPolicy(Preference.PREFER_SFM))
    u2 = union_poses(sa, sb, UnionPolicy(Preference.PREFER_PNP))
    assert set(u1) == a | b and len(u1) >= max(len(a), len(b))
    if not (a <= b or b <= a):
        assert len(u1) > max(len(a), len(b))
    changed = {f for f in u1 if not np.array_equal(u1.pose(f).center, u2.pose(f).center)}
    assert changed == a & b


def test_consistency_gate_falls_back(scene):
    sfm = {f: scene.trajectory[f] for f in range(10)}
    sfm[5] = Pose(sfm[5].rotation, sfm[5].center + [4.0, 0, 0])
    pnp = gt_table(scene, range(10))
    out = union_poses(table(sfm), pnp, UnionPolicy(consistency_gate=3.0))
    assert out[5].provenance is Provenance.HYBRID_PNP
    assert out[4].provenance is Provenance.HYBRID_SFM
    plain = union_poses(table(sfm), pnp)
    assert plain[5].provenance is Provenance.HYBRID_SFM


def test_failure_scenario_coverage(failure_scene):
    t = render_tracks(failure_scene, NoiseSpec())
    k = failure_scene.intrinsics
    sfm = run_incremental_sfm(t.observations, k, n_frames=20).poses
    pnp = relocalize_frames(t.matches, failure_scene.keypoint_coords(), k)
    aligned, rep = align_sfm_to_scan(sfm, pnp)
    assert rep.rms_center_residual < 1e-6
    hybrid = union_poses(aligned, pnp)
    assert len(hybrid) > len(aligned)
    assert set(range(8, 13)) <= set(hybrid)

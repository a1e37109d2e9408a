"""Why the union helps: SfM loses a stretch of video, PnP fills it in.

Video tracks vanish for frames 8..12, so incremental SfM cannot register
them. Scan matches survive, so relocalization still poses those frames.
After aligning SfM into the scan frame the two tables are merged.

    python3 demos/02_sfm_gap_and_union.py
"""
from hybridloc.fuse import align_sfm_to_scan, union_poses
from hybridloc.minisfm import run_incremental_sfm
from hybridloc.pnp import relocalize_frames
from hybridloc.synthworld import NoiseSpec, SceneConfig, generate_scene, render_tracks

scene = generate_scene(SceneConfig(failure_segment=(8, 12)), seed=0)
tracks = render_tracks(scene, NoiseSpec(pixel_sigma=0.5, seed=0))
k = scene.intrinsics

sfm = run_incremental_sfm(tracks.observations, k, n_frames=scene.n_frames)
pnp = relocalize_frames(tracks.matches, scene.keypoint_coords(), k)
aligned, report = align_sfm_to_scan(sfm.poses, pnp)
hybrid = union_poses(aligned, pnp)

print(f"SfM registered frames : {sfm.poses.frames()}")
print(f"PnP relocalized frames: {pnp.frames()}")
print(f"alignment: scale {report.sim3.scale:.4f}, {report.correspondences_used} shared frames, "
      f"rms {1000 * report.rms_center_residual:.2f} mm")
print(f"hybrid coverage {len(hybrid)}/{scene.n_frames}: {hybrid.count_by_provenance()}")

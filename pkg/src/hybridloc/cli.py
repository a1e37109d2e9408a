"""Command-line pipeline: synth | sfm | reloc | fuse | predict | eval | run-all | plot.

Every stage reads its inputs from and writes its outputs to one output
directory, then refreshes ``manifest.yaml`` there. Log verbosity is read
from the ``HYBRIDLOC_LOG`` environment variable (default WARNING).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__, fileio
from .errors import (AlignmentInfeasibleError, HybridLocError, InvalidArgumentError,
                     StageDependencyError)
from .evalkit import Thresholds, aggregate_metrics, evaluate_query, format_table
from .fuse import Preference, UnionPolicy, align_sfm_to_scan, union_poses
from .minisfm import BaParams, SfmParams, run_incremental_sfm
from .pnp import RansacParams, relocalize_frames
from .synthworld import NoiseSpec, SceneConfig, generate_scene, make_detections, render_tracks
from .vq3d import DEFAULT_PROMINENCE, predict_query

log = logging.getLogger("hybridloc")

ABLATIONS = ("hybrid", "sfm-only", "pnp-only")
POSE_FILE_FOR = {"hybrid": "poses_hybrid.csv", "sfm-only": "poses_sfm_aligned.csv", "pnp-only": "poses_pnp.csv"}
ROW_NAME = {"hybrid": "Hybrid (SfM + PnP)", "sfm-only": "SfM only", "pnp-only": "PnP only"}

DEFAULT_PATHS = {
    "scene": "scene.yaml",
    "tracks": "tracks.csv",
    "matches": "matches.csv",
    "detections": "detections.csv",
    "ground_truth": "ground_truth.yaml",
}


@dataclass
class PipelineConfig:
    out: str = "run"
    seed: int = 0
    paths: dict = field(default_factory=lambda: dict(DEFAULT_PATHS))
    scene: SceneConfig = SceneConfig()
    noise: NoiseSpec = NoiseSpec()
    ransac: RansacParams = RansacParams()
    ba: BaParams = BaParams()
    union: UnionPolicy = UnionPolicy()
    thresholds: Thresholds = Thresholds()
    peak_prominence: float = DEFAULT_PROMINENCE

    @classmethod
    def from_dict(cls, d: dict | None) -> "PipelineConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")

        def section(name, typ, **fix):
            vals = dict(d.get(name) or {})
            names = {f.name for f in dataclasses.fields(typ)}
            bad = set(vals) - names
            if bad:
                raise InvalidArgumentError(f"unknown keys in config section '{name}': {sorted(bad)}")
            if "seed" in vals and name in ("noise", "ransac"):
                raise InvalidArgumentError(
                    f"config section '{name}' may not set 'seed'; it is derived from the global seed")
            for key, conv in fix.items():
                if key in vals and vals[key] is not None:
                    vals[key] = conv(vals[key])
            return typ(**vals)

        paths = dict(DEFAULT_PATHS)
        paths.update(d.get("paths") or {})
        return cls(
            out=str(d.get("out", "run")),
            seed=int(d.get("seed", 0)),
            paths=paths,
            scene=section("scene", SceneConfig, extent=tuple, failure_segment=tuple),
            noise=section("noise", NoiseSpec),
            ransac=section("ransac", RansacParams),
            ba=section("ba", BaParams),
            union=section("union", UnionPolicy),
            thresholds=section("thresholds", Thresholds),
            peak_prominence=float(d.get("peak_prominence", DEFAULT_PROMINENCE)),
        )

    def to_dict(self) -> dict:
        def plain(obj):
            out = dataclasses.asdict(obj)
            out.pop("seed", None)
            return {k: (v.value if isinstance(v, Preference) else list(v) if isinstance(v, tuple) else v)
                    for k, v in out.items()}
        return {
            "seed": self.seed,
            "paths": dict(self.paths),
            "scene": plain(self.scene),
            "noise": plain(self.noise),
            "ransac": plain(self.ransac),
            "ba": plain(self.ba),
            "union": plain(self.union),
            "thresholds": plain(self.thresholds),
            "peak_prominence": self.peak_prominence,
        }


def stage_seed(global_seed: int, label: str) -> int:
    """Per-stage seed derived from the global seed by labeled hashing."""
    digest = hashlib.sha256(f"{int(global_seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Run:
    """Resolved paths and config for one output directory."""

    def __init__(self, cfg: PipelineConfig, record_timings: bool = False):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.record_timings = record_timings
        self.timings: dict[str, float] = {}

    def path(self, name: str) -> Path:
        rel = self.cfg.paths.get(name, name)
        p = Path(rel)
        return p if p.is_absolute() else self.out / p

    def ensure_out(self) -> None:
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {self.out}: {exc}") from exc

    def require(self, *names: str) -> None:
        for n in names:
            if not self.path(n).exists():
                raise StageDependencyError(f"missing upstream artifact '{n}': {self.path(n)}")

    # -------------------------------------------------------------- manifest
    def update_manifest(self, stage: str, elapsed: float) -> None:
        mpath = self.out / "manifest.yaml"
        stages = []
        if mpath.exists():
            stages = fileio.read_document(mpath, "manifest").get("stages_completed") or []
        if stage not in stages:
            stages.append(stage)
        self.timings[stage] = elapsed

        coverage = {}
        for label, fname in (("SFM", "poses_sfm.csv"), ("SFM_ALIGNED", "poses_sfm_aligned.csv"),
                             ("PNP", "poses_pnp.csv"), ("HYBRID", "poses_hybrid.csv")):
            p = self.out / fname
            if p.exists():
                table = fileio.read_poses(p)
                coverage[label] = len(table)
                if label == "HYBRID":
                    counts = table.count_by_provenance()
                    coverage["HYBRID-SFM"] = counts["HYBRID-SFM"]
                    coverage["HYBRID-PNP"] = counts["HYBRID-PNP"]
        artifacts = []
        for p in sorted(self.out.iterdir()):
            if p.is_file() and p.name != "manifest.yaml":
                artifacts.append({"name": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
        doc = {
            "tool_version": __version__,
            "config": self.cfg.to_dict(),
            "stages_completed": stages,
            "pose_coverage": coverage,
            "artifacts": artifacts,
        }
        if self.record_timings:
            doc["stage_timings_s"] = {k: round(v, 6) for k, v in self.timings.items()}
        fileio.write_document(mpath, "manifest", doc)


def _timed(stage):
    def deco(fn):
        def wrapper(run: Run, *args, **kwargs):
            t0 = time.perf_counter()
            result = fn(run, *args, **kwargs)
            run.update_manifest(stage if not kwargs.get("ablation") else f"{stage}:{kwargs['ablation']}",
                                time.perf_counter() - t0)
            return result
        wrapper.__name__ = fn.__name__
        wrapper.__doc__ = fn.__doc__
        return wrapper
    return deco


# ------------------------------------------------------------------ stages

@_timed("synth")
def cmd_synth(run: Run) -> None:
    cfg = run.cfg
    run.ensure_out()
    scene = generate_scene(cfg.scene, stage_seed(cfg.seed, "scene"))
    noise = dataclasses.replace(cfg.noise, seed=stage_seed(cfg.seed, "noise"))
    tracks = render_tracks(scene, noise)
    dets = make_detections(scene, noise)
    fileio.write_scene(run.path("scene"), scene)
    fileio.write_tracks(run.path("tracks"), tracks)
    fileio.write_matches(run.path("matches"), tracks.matches)
    fileio.write_detections(run.path("detections"), dets)
    fileio.write_ground_truth(run.path("ground_truth"), scene)
    log.info("synth: %d frames, %d observations, %d detections", scene.n_frames, len(tracks), len(dets))


def _ransac(cfg: PipelineConfig, label: str) -> RansacParams:
    return dataclasses.replace(cfg.ransac, seed=stage_seed(cfg.seed, label))


@_timed("sfm")
def cmd_sfm(run: Run) -> None:
    run.require("scene", "tracks")
    scene = fileio.read_scene(run.path("scene"))
    obs = fileio.read_tracks(run.path("tracks"))
    params = SfmParams(ba=run.cfg.ba, ransac=_ransac(run.cfg, "sfm-ransac"))
    rmap = run_incremental_sfm(obs[:, :4], scene.intrinsics, params, n_frames=scene.n_frames)
    fileio.write_poses(run.out / "poses_sfm.csv", rmap.poses)
    fileio.write_landmarks(run.out / "landmarks.csv", rmap.landmarks)
    log.info("sfm: %d/%d frames registered", len(rmap.poses), scene.n_frames)


@_timed("reloc")
def cmd_reloc(run: Run) -> None:
    run.require("scene", "matches")
    scene = fileio.read_scene(run.path("scene"))
    matches = fileio.read_matches(run.path("matches"))
    table = relocalize_frames(matches, scene.keypoint_coords(), scene.intrinsics, _ransac(run.cfg, "pnp-ransac"))
    fileio.write_poses(run.out / "poses_pnp.csv", table)
    log.info("reloc: %d/%d frames relocalized", len(table), scene.n_frames)


@_timed("fuse")
def cmd_fuse(run: Run) -> None:
    for name in ("poses_sfm.csv", "poses_pnp.csv"):
        if not (run.out / name).exists():
            raise StageDependencyError(f"missing upstream artifact '{name}': {run.out / name}")
    sfm = fileio.read_poses(run.out / "poses_sfm.csv")
    pnp = fileio.read_poses(run.out / "poses_pnp.csv")
    aligned, report = align_sfm_to_scan(sfm, pnp)
    hybrid = union_poses(aligned, pnp, run.cfg.union)
    fileio.write_poses(run.out / "poses_sfm_aligned.csv", aligned)
    fileio.write_poses(run.out / "poses_hybrid.csv", hybrid)
    sim = report.sim3
    fileio.write_document(run.out / "alignment.yaml", "alignment", {
        "sim3": {"scale": sim.scale, "rotation": sim.rotation.tolist(), "translation": sim.translation.tolist()},
        "correspondences_used": report.correspondences_used,
        "rms_center_residual": report.rms_center_residual,
        "excluded_frames": report.excluded_frames,
        "residuals": {int(f): r for f, r in report.residuals.items()},
    })
    log.info("fuse: %d hybrid poses (sfm %d, pnp %d)", len(hybrid), len(aligned), len(pnp))


@_timed("predict")
def cmd_predict(run: Run, ablation: str = "hybrid") -> None:
    pose_file = run.out / POSE_FILE_FOR[ablation]
    if not pose_file.exists():
        raise StageDependencyError(f"missing upstream artifact '{pose_file.name}': {pose_file}")
    run.require("scene", "detections", "ground_truth")
    scene = fileio.read_scene(run.path("scene"))
    poses = fileio.read_poses(pose_file)
    dets = fileio.read_detections(run.path("detections"))
    preds = []
    for q in fileio.read_ground_truth(run.path("ground_truth")):
        qid = int(q["query_id"])
        preds.append(predict_query(dets.get(qid, []), poses, scene.intrinsics, int(q["query_frame"]),
                                   query_id=qid, min_prominence=run.cfg.peak_prominence))
    fileio.write_predictions(run.out / f"predictions_{ablation}.yaml", preds, ablation)


@_timed("eval")
def cmd_eval(run: Run, ablation: str = "hybrid"):
    pred_file = run.out / f"predictions_{ablation}.yaml"
    if not pred_file.exists():
        raise StageDependencyError(f"missing upstream artifact '{pred_file.name}': {pred_file}")
    run.require("ground_truth")
    preds = {p.query_id: p for p in fileio.read_predictions(pred_file)}
    records = []
    for q in fileio.read_ground_truth(run.path("ground_truth")):
        qid = int(q["query_id"])
        if qid not in preds:
            raise InvalidArgumentError(f"{pred_file}: no prediction for query {qid}")
        records.append(evaluate_query(preds[qid], q["object_center"], q["camera_center"], run.cfg.thresholds))
    if not records:
        raise InvalidArgumentError("ground truth holds no queries; nothing to evaluate")
    report = aggregate_metrics(records)
    doc = report.to_dict()
    doc["pose_source"] = ablation
    doc["thresholds"] = {"tau_l2": run.cfg.thresholds.tau_l2, "tau_angle": run.cfg.thresholds.tau_angle}
    doc["per_query"] = [dataclasses.asdict(r) for r in records]
    fileio.write_document(run.out / f"metrics_{ablation}.yaml", "metrics", doc)
    with open(run.out / f"metrics_{ablation}.txt", "w", newline="\n") as fh:
        fh.write(fileio.header("metrics-table"))
        fh.write(format_table([(ROW_NAME[ablation], report)]))
    return report


def cmd_run_all(run: Run) -> dict:
    cmd_synth(run)
    cmd_sfm(run)
    cmd_reloc(run)
    cmd_fuse(run)
    reports = {}
    for ablation in ("hybrid", "sfm-only"):
        cmd_predict(run, ablation=ablation)
        reports[ablation] = cmd_eval(run, ablation=ablation)
    t0 = time.perf_counter()
    rows = [(ROW_NAME[a], reports[a]) for a in ("hybrid", "sfm-only")]
    with open(run.out / "comparison.txt", "w", newline="\n") as fh:
        fh.write(fileio.header("comparison-table"))
        fh.write(format_table(rows))
    fileio.write_document(run.out / "comparison.yaml", "comparison",
                          {a: reports[a].to_dict() for a in ("hybrid", "sfm-only")})
    run.update_manifest("run-all", time.perf_counter() - t0)
    return reports


@_timed("plot")
def cmd_plot(run: Run) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run.require("scene")
    tables = {}
    for label, fname in (("SfM (aligned)", "poses_sfm_aligned.csv"), ("PnP", "poses_pnp.csv"),
                         ("hybrid", "poses_hybrid.csv")):
        p = run.out / fname
        if not p.exists():
            raise StageDependencyError(f"missing upstream artifact '{fname}': {p}")
        tables[label] = fileio.read_poses(p)
    scene = fileio.read_scene(run.path("scene"))
    preds_file = run.out / "predictions_hybrid.yaml"
    preds = fileio.read_predictions(preds_file) if preds_file.exists() else []

    plt.rcParams["svg.hashsalt"] = "hybridloc"
    fig, ax = plt.subplots(figsize=(7, 6))
    gt = np.array([p.center for p in scene.trajectory])
    ax.plot(gt[:, 0], gt[:, 1], "-", color="0.6", lw=3, label=f"ground truth ({len(gt)} poses)")
    styles = {"SfM (aligned)": dict(ls="--", marker="o", ms=4, color="tab:blue"),
              "PnP": dict(ls=":", marker="x", ms=5, color="tab:orange"),
              "hybrid": dict(ls="-", marker=".", ms=5, color="tab:green", lw=1)}
    for label, table in tables.items():
        c = table.centers() if len(table) else np.zeros((0, 3))
        ax.plot(c[:, 0], c[:, 1], label=f"{label} ({len(table)} poses)", **styles[label])
    objs = np.array([q.object_center for q in scene.queries]).reshape(-1, 3)
    ax.scatter(objs[:, 0], objs[:, 1], marker="*", s=120, color="k", label="object (truth)")
    ok = np.array([p.object_world for p in preds if p.object_world is not None]).reshape(-1, 3)
    ax.scatter(ok[:, 0], ok[:, 1], marker="+", s=100, color="tab:red", label="object (predicted)")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title("Top-down camera trajectories")
    ax.legend(fontsize=8, loc="best")
    out = run.out / "trajectory.svg"
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out


# ------------------------------------------------------------------ entry point

EXIT_CODES = {StageDependencyError: 3, AlignmentInfeasibleError: 4}


def load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.exists():
        raise StageDependencyError(f"config file not found: {p}")
    with open(p) as fh:
        return PipelineConfig.from_dict(yaml.safe_load(fh))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML pipeline configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--policy", choices=[p.value for p in Preference],
                        help="conflict policy for frames posed by both SfM and PnP")
    common.add_argument("--ablation", choices=ABLATIONS, default="hybrid",
                        help="pose table used by predict/eval")
    common.add_argument("--timings", action="store_true",
                        help="record wall-clock stage timings in the manifest (breaks byte-reproducibility)")
    parser = argparse.ArgumentParser(prog="hybridloc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hybridloc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "sfm", "reloc", "fuse", "predict", "eval", "run-all", "plot"):
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("HYBRIDLOC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        if args.policy is not None:
            cfg.union = dataclasses.replace(cfg.union, preference=Preference(args.policy))
        run = Run(cfg, record_timings=args.timings)
        if args.command not in ("synth", "run-all"):
            if not run.out.is_dir():
                raise StageDependencyError(f"output directory does not exist: {run.out}")
        commands = {
            "synth": lambda: cmd_synth(run),
            "sfm": lambda: cmd_sfm(run),
            "reloc": lambda: cmd_reloc(run),
            "fuse": lambda: cmd_fuse(run),
            "predict": lambda: cmd_predict(run, ablation=args.ablation),
            "eval": lambda: cmd_eval(run, ablation=args.ablation),
            "run-all": lambda: cmd_run_all(run),
            "plot": lambda: cmd_plot(run),
        }
        if args.command == "run-all":
            run.ensure_out()
        result = commands[args.command]()
        if args.command == "eval":
            sys.stdout.write(format_table([(ROW_NAME[args.ablation], result)]))
        elif args.command == "run-all":
            sys.stdout.write(format_table([(ROW_NAME[a], r) for a, r in result.items()]))
        return 0
    except HybridLocError as exc:
        print(f"hybridloc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(type(exc), 1)
    except OSError as exc:
        print(f"hybridloc {args.command}: I/O error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())

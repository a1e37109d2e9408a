"""On-disk formats.

Every file starts with a schema line ``# hybridloc/<kind> v<N>``. Tables
are CSV; nested documents are YAML. Floats are written with 17
significant digits so that reading a file back reproduces the exact bits.
"""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np
import yaml

from .errors import InvalidArgumentError, StageDependencyError
from .geometry import Intrinsics, Pose, PoseEntry, PoseTable, Provenance
from .synthworld import QueryTruth, SceneTruth, TrackSet
from .vq3d import Detection, Prediction, Status

SCHEMA_VERSION = 1

POSE_COLUMNS = ["frame", "provenance"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz"]
TRACK_COLUMNS = ["frame", "point_id", "u", "v", "depth"]
MATCH_COLUMNS = ["frame", "point_id", "u", "v"]
DETECTION_COLUMNS = ["query_id", "frame", "u", "v", "depth", "confidence"]
LANDMARK_COLUMNS = ["point_id", "x", "y", "z"]


def fmt_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return ".nan"
    if math.isinf(x):
        return ".inf" if x > 0 else "-.inf"
    s = f"{x:.17g}"
    # YAML 1.1 only resolves floats that carry a '.'
    if "." not in s:
        mant, _, exp = s.partition("e")
        s = mant + ".0" + ("e" + exp if exp else "")
    return s


def header(kind: str) -> str:
    return f"# hybridloc/{kind} v{SCHEMA_VERSION}\n"


def _check_header(path: Path, first: str, kind: str) -> None:
    expected = header(kind).strip()
    if first.strip() != expected:
        raise InvalidArgumentError(f"{path}: expected schema line '{expected}', found '{first.strip()}'")


# ------------------------------------------------------------------ YAML documents

class _Dumper(yaml.SafeDumper):
    pass


def _represent_float(dumper, value):
    return dumper.represent_scalar("tag:yaml.org,2002:float", fmt_float(value))


_Dumper.add_representer(float, _represent_float)
_Dumper.add_representer(np.float64, _represent_float)


def _plain(obj):
    """Convert numpy containers/scalars into plain Python for YAML."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_document(path, kind: str, doc: dict) -> Path:
    path = Path(path)
    body = yaml.dump(_plain(doc), Dumper=_Dumper, sort_keys=False, default_flow_style=None, width=120)
    with open(path, "w", newline="\n") as fh:
        fh.write(header(kind))
        fh.write(body)
    return path


def read_document(path, kind: str) -> dict:
    path = _require(path)
    with open(path) as fh:
        text = fh.read()
    _check_header(path, text.split("\n", 1)[0], kind)
    return yaml.safe_load(text) or {}


# ------------------------------------------------------------------ CSV tables

def _write_csv(path, kind: str, columns, rows) -> Path:
    path = Path(path)
    buf = io.StringIO()
    buf.write(header(kind))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())
    return path


def _read_csv(path, kind: str, columns) -> list[list[str]]:
    path = _require(path)
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise InvalidArgumentError(f"{path}: empty file")
    _check_header(path, lines[0], kind)
    reader = csv.reader(lines[1:])
    cols = next(reader, None)
    if cols != list(columns):
        raise InvalidArgumentError(f"{path}: expected columns {columns}, found {cols}")
    return [row for row in reader if row]


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise StageDependencyError(f"missing upstream artifact: {path}")
    return path


def write_poses(path, table: PoseTable) -> Path:
    rows = []
    for f, entry in table.items():
        rows.append([f, entry.provenance.value, *map(float, entry.pose.rotation.ravel()),
                     *map(float, entry.pose.translation)])
    return _write_csv(path, "poses", POSE_COLUMNS, rows)


def read_poses(path) -> PoseTable:
    entries = {}
    for row in _read_csv(path, "poses", POSE_COLUMNS):
        vals = [float(v) for v in row[2:]]
        R = np.array(vals[:9]).reshape(3, 3)
        entries[int(row[0])] = PoseEntry(Pose(R, vals[9:]), Provenance(row[1]))
    return PoseTable(entries)


def write_tracks(path, tracks: TrackSet) -> Path:
    rows = [[int(f), int(p), float(u), float(v), float(d)] for f, p, u, v, d in tracks.observations]
    return _write_csv(path, "tracks", TRACK_COLUMNS, rows)


def read_tracks(path) -> np.ndarray:
    rows = _read_csv(path, "tracks", TRACK_COLUMNS)
    return np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(-1, 5)


def write_matches(path, matches: dict[int, np.ndarray]) -> Path:
    rows = []
    for f in sorted(matches):
        for pid, u, v in matches[f]:
            rows.append([int(f), int(pid), float(u), float(v)])
    return _write_csv(path, "matches", MATCH_COLUMNS, rows)


def read_matches(path) -> dict[int, np.ndarray]:
    out: dict[int, list] = {}
    for f, pid, u, v in _read_csv(path, "matches", MATCH_COLUMNS):
        out.setdefault(int(f), []).append([float(pid), float(u), float(v)])
    return {f: np.array(rows) for f, rows in out.items()}


def write_detections(path, dets) -> Path:
    rows = [[d.query_id, d.frame, float(d.u), float(d.v), float(d.depth), float(d.confidence)] for d in dets]
    return _write_csv(path, "detections", DETECTION_COLUMNS, rows)


def read_detections(path) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for q, f, u, v, d, c in _read_csv(path, "detections", DETECTION_COLUMNS):
        out.setdefault(int(q), []).append(Detection(int(q), int(f), (float(u), float(v)), float(d), float(c)))
    return out


def write_landmarks(path, landmarks: dict[int, np.ndarray]) -> Path:
    rows = [[int(p), *map(float, X)] for p, X in sorted(landmarks.items())]
    return _write_csv(path, "landmarks", LANDMARK_COLUMNS, rows)


def read_landmarks(path) -> dict[int, np.ndarray]:
    return {int(r[0]): np.array([float(v) for v in r[1:]]) for r in _read_csv(path, "landmarks", LANDMARK_COLUMNS)}


# ------------------------------------------------------------------ scene & ground truth

def write_scene(path, scene: SceneTruth) -> Path:
    k = scene.intrinsics
    doc = {
        "intrinsics": {"fx": float(k.fx), "fy": float(k.fy), "cx": float(k.cx), "cy": float(k.cy),
                       "width": int(k.width), "height": int(k.height)},
        "n_frames": scene.n_frames,
        "failure_segment": list(scene.failure_segment) if scene.failure_segment else None,
        "trajectory": [[*p.rotation.ravel().tolist(), *p.translation.tolist()] for p in scene.trajectory],
        "points": [[int(i), *X.tolist()] for i, X in zip(scene.point_ids, scene.points)],
        "scan_keypoint_ids": [int(i) for i in scene.keypoint_ids],
        "objects": [{"query_id": q.query_id, "center": q.object_center.tolist(), "query_frame": q.query_frame}
                    for q in scene.queries],
    }
    return write_document(path, "scene", doc)


def read_scene(path) -> SceneTruth:
    doc = read_document(path, "scene")
    ki = doc["intrinsics"]
    k = Intrinsics(ki["fx"], ki["fy"], ki["cx"], ki["cy"], ki["width"], ki["height"])
    traj = [Pose(np.array(row[:9]).reshape(3, 3), row[9:]) for row in doc["trajectory"]]
    pts = np.array(doc["points"], dtype=np.float64).reshape(-1, 4)
    queries = [QueryTruth(int(o["query_id"]), np.array(o["center"], dtype=np.float64), int(o["query_frame"]))
               for o in doc["objects"]]
    seg = doc.get("failure_segment")
    return SceneTruth(pts[:, 0].astype(int), pts[:, 1:], np.array(doc["scan_keypoint_ids"], dtype=int),
                      traj, k, queries, tuple(seg) if seg else None)


def write_ground_truth(path, scene: SceneTruth) -> Path:
    doc = {"queries": [{"query_id": q.query_id, "query_frame": q.query_frame,
                        "object_center": q.object_center.tolist(),
                        "camera_center": scene.trajectory[q.query_frame].center.tolist()}
                       for q in scene.queries]}
    return write_document(path, "ground-truth", doc)


def read_ground_truth(path) -> list[dict]:
    return read_document(path, "ground-truth")["queries"] or []


# ------------------------------------------------------------------ predictions

def write_predictions(path, preds: list[Prediction], source: str) -> Path:
    items = []
    for p in preds:
        items.append({
            "query_id": p.query_id,
            "status": p.status.value,
            "object_world": None if p.object_world is None else p.object_world.tolist(),
            "displacement": None if p.displacement is None else p.displacement.tolist(),
            "views_used": p.views_used,
        })
    return write_document(path, "predictions", {"pose_source": source, "predictions": items})


def read_predictions(path) -> list[Prediction]:
    doc = read_document(path, "predictions")
    out = []
    for it in doc["predictions"] or []:
        obj = it.get("object_world")
        disp = it.get("displacement")
        out.append(Prediction(int(it["query_id"]), Status(it["status"]),
                              None if obj is None else np.array(obj, dtype=np.float64),
                              None if disp is None else np.array(disp, dtype=np.float64),
                              int(it.get("views_used", 0))))
    return out


"""File formats: JSONL pose/hand/track streams, OBJ meshes, manifests,
gesture exemplars, asset libraries, and the TOML config.

On-disk units are strictly SI (meters, radians); quaternions are wxyz and
renormalized on ingest (rejected when the norm deviates by more than 1e-3).
All writes are atomic (temp file + rename) and deterministic.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .augment import ObjectAsset
from .canonical import CameraModel
from .geom import Pose, Rot3
from .plausibility import TriMesh
from .retarget import (
    FINGER_ONLY,
    WHOLE_HAND,
    GestureExemplar,
    GripperTrajectory,
    HandFrame,
    KeypointTrack,
    gesture_features,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ManifestError(ValueError):
    pass


def pose_to_json(p: Pose) -> dict:
    return {"t": [float(x) for x in p.trans], "q": [float(x) for x in p.rot.to_quat_wxyz()]}


def pose_from_json(d: dict) -> Pose:
    return Pose(Rot3.from_quat_wxyz(d["q"]), d["t"])


def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_jsonl(path: Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def load_pose_stream(path: Path) -> list[Pose]:
    return [pose_from_json(r) for r in read_jsonl(path)]


def save_pose_stream(path: Path, poses: Iterable[Pose]) -> None:
    write_jsonl(path, (pose_to_json(p) for p in poses))


def load_hand_stream(path: Path, validate_bones: bool = True) -> list[HandFrame]:
    frames = []
    for i, r in enumerate(read_jsonl(path)):
        frame = HandFrame(np.asarray(r["joints"], dtype=np.float64), r.get("handedness", "right"))
        if validate_bones:
            try:
                frame.validate_bones()
            except ValueError as e:
                raise ValueError(f"{path} frame {i}: {e}") from None
        frames.append(frame)
    return frames


def save_hand_stream(path: Path, frames: Iterable[HandFrame]) -> None:
    write_jsonl(
        path,
        (
            {"joints": [[float(x) for x in row] for row in f.keypoints], "handedness": f.handedness}
            for f in frames
        ),
    )


def load_track(path: Path) -> KeypointTrack:
    recs = read_jsonl(path)
    positions = np.array([r["points"] for r in recs], dtype=np.float64)
    valid = np.array([r["valid"] for r in recs], dtype=bool)
    return KeypointTrack(positions, valid)


def save_track(path: Path, track: KeypointTrack) -> None:
    write_jsonl(
        path,
        (
            {
                "points": [[float(x) for x in p] for p in track.positions[t]],
                "valid": [bool(v) for v in track.valid[t]],
            }
            for t in range(track.positions.shape[0])
        ),
    )


def load_exemplars(path: Path) -> list[GestureExemplar]:
    data = json.loads(Path(path).read_text())
    out = []
    for rec in data:
        if rec["label"] not in (WHOLE_HAND, FINGER_ONLY):
            raise ValueError(f"bad gesture label {rec['label']!r} in {path}")
        frame = HandFrame(np.asarray(rec["joints"], dtype=np.float64))
        out.append(GestureExemplar(rec["label"], gesture_features(frame)))
    return out


def load_obj(path: Path) -> TriMesh:
    """Minimal OBJ loader: v/f only, quads split, other statements ignored."""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                if len(idx) < 3:
                    raise ValueError(f"{path}:{ln}: face with fewer than 3 vertices")
                for k in range(1, len(idx) - 1):  # fan-split quads and n-gons
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return TriMesh(np.array(vertices), np.array(faces, dtype=np.int64))


def save_obj(path: Path, mesh: TriMesh) -> None:
    lines = [f"v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f}" for v in mesh.vertices]
    lines += [f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}" for t in mesh.triangles]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_asset_library(path: Path) -> list[ObjectAsset]:
    data = json.loads(Path(path).read_text())
    base = Path(path).parent
    assets = []
    for rec in data:
        mesh_path = Path(rec["mesh_path"])
        if not mesh_path.is_absolute():
            mesh_path = base / mesh_path
        assets.append(
            ObjectAsset(
                id=rec["id"],
                mesh=load_obj(mesh_path),
                canonical_pose=pose_from_json(rec.get("canonical_pose", {"t": [0, 0, 0], "q": [1, 0, 0, 0]})),
                category=rec.get("category", ""),
                embedding=np.asarray(rec["embedding"], dtype=np.float64) if rec.get("embedding") else None,
            )
        )
    return assets


@dataclass
class ClipManifest:
    clip_id: str
    fps: float
    path: Path  # manifest file location; stream paths resolve relative to it
    camera: Optional[CameraModel] = None
    cam_to_world: Pose = field(default_factory=Pose.identity)
    hand_stream: Optional[Path] = None
    object_pose_stream: Optional[Path] = None
    keypoint_tracks: Optional[Path] = None
    mesh: Optional[Path] = None
    anchors: Optional[Path] = None
    notes: str = ""


@dataclass
class Clip:
    manifest: ClipManifest
    hand_frames: list[HandFrame]
    object_poses: Optional[list[Pose]] = None
    tracks: Optional[KeypointTrack] = None
    mesh: Optional[TriMesh] = None
    anchors: Optional[dict] = None


def load_manifest(path: Path) -> ClipManifest:
    path = Path(path)
    data = json.loads(path.read_text())
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestError(f"unknown schema version {version!r} (supported: {SCHEMA_VERSION})")
    if data.get("fps", 0) <= 0:
        raise ManifestError("fps must be positive")
    cam = None
    if "camera" in data:
        cam = CameraModel(**data["camera"])

    def resolve(key: str) -> Optional[Path]:
        if key not in data or data[key] is None:
            return None
        p = Path(data[key])
        if not p.is_absolute():
            p = path.parent / p
        if not p.exists():
            raise ManifestError(f"referenced path does not exist: {p}")
        return p

    return ClipManifest(
        clip_id=data["clip_id"],
        fps=float(data["fps"]),
        path=path,
        camera=cam,
        cam_to_world=pose_from_json(data["cam_to_world"]) if "cam_to_world" in data else Pose.identity(),
        hand_stream=resolve("hand_stream"),
        object_pose_stream=resolve("object_pose_stream"),
        keypoint_tracks=resolve("keypoint_tracks"),
        mesh=resolve("mesh"),
        anchors=resolve("anchors"),
        notes=data.get("notes", ""),
    )


def load_clip(manifest_path: Path) -> Clip:
    """Load and cross-validate all streams referenced by a manifest."""
    m = load_manifest(manifest_path)
    if m.hand_stream is None:
        raise ManifestError(f"{m.clip_id}: manifest has no hand stream")
    hand = load_hand_stream(m.hand_stream)
    T = len(hand)

    obj = None
    if m.object_pose_stream is not None:
        obj = load_pose_stream(m.object_pose_stream)
        if len(obj) != T:
            raise ManifestError(
                f"{m.clip_id}: hand stream has {T} frames but object stream has {len(obj)}"
            )
    tracks = None
    if m.keypoint_tracks is not None:
        tracks = load_track(m.keypoint_tracks)
        if tracks.positions.shape[0] != T:
            raise ManifestError(
                f"{m.clip_id}: hand stream has {T} frames but keypoint track has "
                f"{tracks.positions.shape[0]}"
            )
    mesh = load_obj(m.mesh) if m.mesh is not None else None
    anchors = json.loads(m.anchors.read_text()) if m.anchors is not None else None
    return Clip(m, hand, obj, tracks, mesh, anchors)


def save_trajectory(path: Path, traj: GripperTrajectory) -> None:
    recs = []
    for i, (p, c) in enumerate(zip(traj.poses, traj.commands)):
        rec = pose_to_json(p)
        rec["g"] = c
        if traj.widths and traj.widths[i] is not None:
            rec["width"] = float(traj.widths[i])
        recs.append(rec)
    write_jsonl(path, recs)


def load_trajectory(path: Path) -> GripperTrajectory:
    recs = read_jsonl(path)
    return GripperTrajectory(
        poses=[pose_from_json(r) for r in recs],
        commands=[r["g"] for r in recs],
        widths=[r.get("width") for r in recs],
    )


def load_config(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)

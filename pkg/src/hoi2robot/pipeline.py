"""Batch pipeline tying the stages together:
canonicalize -> retarget -> plausibility check -> augment -> replay -> metrics.

Each clip becomes one or more episode directories (trajectory.jsonl,
joints_<robot>.jsonl, report.json, lineage.json).  Per-clip failures are
isolated and reported; identical inputs, config, and seed produce
byte-identical outputs.
"""

from __future__ import annotations

import csv
import io as _io
import logging
import traceback
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import augment as aug
from . import canonical as canon
from . import io as hio
from . import kinematics as kin
from . import metrics as met
from . import plausibility as plaus
from . import retarget as ret
from .geom import Pose, Rot3, so3_exp

log = logging.getLogger(__name__)

PALM_KEYPOINTS = [
    ret.KP["wrist"],
    ret.KP["index_mcp"],
    ret.KP["middle_mcp"],
    ret.KP["ring_mcp"],
    ret.KP["pinky_mcp"],
]


@dataclass
class RobotSpec:
    name: str
    chain: kin.KinematicChain
    q0: np.ndarray

    @staticmethod
    def from_config(name: str, xml_path: Path, root_link: str, ee_link: str,
                    q0: Optional[Sequence[float]] = None) -> "RobotSpec":
        chain = kin.parse_chain(Path(xml_path).read_text(), root_link, ee_link)
        if q0 is None:
            q0 = 0.5 * (chain.lower + chain.upper)
        return RobotSpec(name, chain, np.asarray(q0, dtype=np.float64))


@dataclass
class PipelineConfig:
    robots: list[RobotSpec] = field(default_factory=list)
    exemplars: list[ret.GestureExemplar] = field(default_factory=list)
    gesture_override: Optional[str] = None
    d_z: float = 0.0
    voxel: float = plaus.DEFAULT_VOXEL_M
    resolve_penetration: bool = False
    mirror: bool = False
    hold_transform_trans: float = 0.0  # sampled translation magnitude, meters
    hold_transform_rot: float = 0.0  # sampled rotation magnitude, radians
    n_augments: int = 0
    tau_screw: float = aug.DEFAULT_TAU_SCREW_RAD
    rotation_cap: float = aug.DEFAULT_ROTATION_CAP_RAD
    canonicalize: bool = True
    seed: int = 0
    jobs: int = 1

    @staticmethod
    def from_dict(data: dict, base: Path) -> "PipelineConfig":
        cfg = PipelineConfig()
        for key in (
            "d_z", "voxel", "resolve_penetration", "mirror", "hold_transform_trans",
            "hold_transform_rot", "n_augments", "tau_screw", "rotation_cap",
            "canonicalize", "seed", "jobs", "gesture_override",
        ):
            if key in data:
                setattr(cfg, key, data[key])
        if "exemplars" in data:
            p = Path(data["exemplars"])
            cfg.exemplars = hio.load_exemplars(p if p.is_absolute() else base / p)
        for rob in data.get("robots", []):
            p = Path(rob["xml"])
            cfg.robots.append(
                RobotSpec.from_config(
                    rob["name"],
                    p if p.is_absolute() else base / p,
                    rob["root_link"],
                    rob["ee_link"],
                    rob.get("q0"),
                )
            )
        return cfg


@dataclass
class EpisodeRecord:
    episode_id: str
    trajectory: ret.GripperTrajectory
    joints: dict  # robot name -> list of configs
    replay_reports: dict  # robot name -> kin.ReplayReport
    segments: list[aug.Segment]
    object_poses: Optional[list[Pose]]
    lineage: dict
    metrics: met.MetricReport
    penetration: Optional[dict] = None
    feasible: bool = True


def _report_to_dict(r: kin.ReplayReport) -> dict:
    return {
        "feasible": r.feasible,
        "failed_frame": r.failed_frame,
        "failure": r.failure,
        "max_joint_step": r.max_joint_step,
        "max_residual_pos": max(r.residual_pos) if r.residual_pos else None,
        "max_residual_rot": max(r.residual_rot) if r.residual_rot else None,
        "limit_saturated_frames": int(sum(r.limit_saturated)),
    }


def write_episode(out_dir: Path, ep: EpisodeRecord) -> None:
    d = Path(out_dir) / ep.episode_id
    d.mkdir(parents=True, exist_ok=True)
    hio.save_trajectory(d / "trajectory.jsonl", ep.trajectory)
    if ep.object_poses is not None:
        hio.save_pose_stream(d / "object_poses.jsonl", ep.object_poses)
    for robot, configs in ep.joints.items():
        hio.write_jsonl(d / f"joints_{robot}.jsonl", ({"q": [float(x) for x in q]} for q in configs))
    report = {
        "episode_id": ep.episode_id,
        "feasible": ep.feasible,
        "gesture": ep.trajectory.gesture,
        "segments": [{"start": s.start, "end": s.end, "state": s.state} for s in ep.segments],
        "replay": {k: _report_to_dict(v) for k, v in ep.replay_reports.items()},
        "metrics": ep.metrics.to_dict(),
        "penetration": ep.penetration,
    }
    hio.write_json(d / "report.json", report)
    hio.write_json(d / "lineage.json", ep.lineage)


def canonicalize_clip(clip: hio.Clip) -> tuple[hio.Clip, Optional[canon.CanonicalTransform]]:
    """Lift to the canonical action space when the inputs allow it."""
    wrists = np.array([f.kp("wrist") for f in clip.hand_frames])
    if clip.object_poses is None:
        return clip, None
    centroids = np.array([p.trans for p in clip.object_poses])
    if clip.anchors is not None:
        a = clip.anchors
        anchors = canon.BodyAnchors(
            a["hip_left"], a["hip_right"], a["shoulder_left"], a["shoulder_right"],
            a.get("up", [0, 0, 1]), a["approach"],
        )
        hint = anchors.lateral_hint()
    else:
        approach = canon.default_approach(wrists, centroids)
        anchors = canon.BodyAnchors(
            np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), [0, 0, 1], approach,
        )
        hint = None
    t0 = canon.default_t0(wrists, centroids)
    ct = canon.build_canonical_frame(anchors, centroids[t0], t0, hint)
    T = ct.t_w_to_A
    new_hands = [
        ret.HandFrame(T.apply(f.keypoints), f.handedness) for f in clip.hand_frames
    ]
    new_objs = canon.apply_canonical(ct, clip.object_poses)
    new_clip = hio.Clip(clip.manifest, new_hands, new_objs, clip.tracks, clip.mesh, clip.anchors)
    return new_clip, ct


def check_penetration(
    clip: hio.Clip,
    traj: ret.GripperTrajectory,
    voxel: float,
    resolve: bool,
) -> tuple[ret.GripperTrajectory, dict]:
    """Score palm penetration against the object TSDF, optionally resolving it.

    The TSDF is built once in the object frame; hand points are mapped
    through the per-frame object pose.  When resolving, the wrist-frame
    displacement found for a frame is applied to that frame's gripper pose.
    """
    grid = plaus.build_tsdf(clip.mesh, voxel=voxel)
    energies = []
    max_depth = 0.0
    resolved_frames = 0
    poses = list(traj.poses)
    for t, frame in enumerate(clip.hand_frames):
        obj_pose = clip.object_poses[t] if clip.object_poses else Pose.identity()
        pts_obj = obj_pose.inverse().apply(frame.keypoints[PALM_KEYPOINTS])
        e = plaus.point_penetration_energy(pts_obj, grid)
        energies.append(e)
        if e > 0:
            phi = plaus.query_sdf(grid, pts_obj)
            max_depth = max(max_depth, float(-phi.min()))
            if resolve:
                surface = plaus.HandSurface(pts_obj, np.arange(len(pts_obj)))
                res = plaus.resolve_penetration(Pose.identity(), surface, grid, subset="all")
                delta_world = obj_pose.rot.apply(res.pose.trans)
                poses[t] = Pose(poses[t].rot, poses[t].trans + delta_world)
                resolved_frames += 1
    out = ret.GripperTrajectory(poses, list(traj.commands), traj.widths, traj.gesture, traj.interpolated)
    summary = {
        "max_energy": max(energies) if energies else 0.0,
        "penetrating_frames": int(sum(1 for e in energies if e > 0)),
        "max_depth_m": max_depth,
        "resolved_frames": resolved_frames,
    }
    return out, summary


def _make_hold_transform(rng: np.random.Generator, cfg: PipelineConfig) -> Pose:
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    trans = direction * cfg.hold_transform_trans * rng.random()
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = min(cfg.hold_transform_rot * rng.random(), cfg.rotation_cap)
    return Pose(Rot3(so3_exp(axis * ang)), trans)


def _compute_metrics(
    clip_fps: float,
    traj: ret.GripperTrajectory,
    object_poses: Optional[list[Pose]],
) -> met.MetricReport:
    report = met.MetricReport(fps=clip_fps)
    positions = np.array([p.trans for p in traj.poses])
    if len(positions) >= 3:
        report.jitter_cm_s2 = met.hand_jitter(positions, clip_fps)
    if object_poses is not None and len(traj) >= 2:
        ts, rs = met.rel_pose_consistency(traj.poses, object_poses)
        report.rel_trans_std_cm = ts
        report.rel_rot_std_deg = rs
    return report


def process_clip(clip: hio.Clip, cfg: PipelineConfig, out_dir: Path) -> list[EpisodeRecord]:
    """Run every stage for one clip; returns the emitted episode records."""
    rng = np.random.default_rng([cfg.seed, zlib.crc32(clip.manifest.clip_id.encode())])

    if cfg.canonicalize:
        clip, _ = canonicalize_clip(clip)

    rcfg = ret.RetargetConfig(
        exemplars=cfg.exemplars,
        d_z=cfg.d_z,
        gesture_override=cfg.gesture_override if (cfg.gesture_override or cfg.exemplars) else ret.WHOLE_HAND,
    )
    traj = ret.retarget_trajectory(clip.hand_frames, clip.tracks, rcfg)

    penetration = None
    if clip.mesh is not None:
        traj, penetration = check_penetration(clip, traj, cfg.voxel, cfg.resolve_penetration)

    episodes: list[EpisodeRecord] = []

    def build_episode(episode_id: str, t: ret.GripperTrajectory,
                      obj: Optional[list[Pose]], lineage: dict) -> EpisodeRecord:
        segments = aug.segment_trajectory(t)
        joints = {}
        reports = {}
        feasible = True
        for robot in cfg.robots:
            try:
                configs, rep = kin.replay_trajectory(robot.chain, t.poses, robot.q0)
            except kin.IkError as e:
                configs, rep = [], kin.ReplayReport([], [], [], 0.0, False, 0, str(e))
            joints[robot.name] = configs
            reports[robot.name] = rep
            feasible = feasible and rep.feasible
        return EpisodeRecord(
            episode_id=episode_id,
            trajectory=t,
            joints=joints,
            replay_reports=reports,
            segments=segments,
            object_poses=obj,
            lineage=lineage,
            metrics=_compute_metrics(clip.manifest.fps, t, obj),
            penetration=penetration,
            feasible=feasible,
        )

    base_lineage = {"source_clip": clip.manifest.clip_id, "augmentation": [], "seed": cfg.seed}
    episodes.append(build_episode(clip.manifest.clip_id, traj, clip.object_poses, base_lineage))

    if cfg.mirror:
        mres = aug.mirror_trajectory(
            traj, clip.object_poses or [Pose.identity()] * len(traj),
            aug.MirrorSpec(cfg.tau_screw),
        )
        if mres.rejected:
            log.warning("%s: mirror rejected (%s)", clip.manifest.clip_id, mres.reject_reason)
        else:
            mt = ret.GripperTrajectory(mres.hand, list(traj.commands), traj.widths, traj.gesture)
            episodes.append(
                build_episode(
                    f"{clip.manifest.clip_id}__mirror",
                    mt,
                    mres.object if clip.object_poses else None,
                    {"source_clip": clip.manifest.clip_id,
                     "augmentation": ["mirror"], "seed": cfg.seed},
                )
            )

    for i in range(cfg.n_augments):
        t_o = _make_hold_transform(rng, cfg)
        try:
            at = aug.augment_trajectory(traj, t_o, cfg.rotation_cap)
        except (ValueError, aug.DegenerateGeometryError) as e:
            log.warning("%s: augmentation %d skipped: %s", clip.manifest.clip_id, i, e)
            continue
        new_obj = None
        if clip.object_poses is not None:
            hold_frames = set()
            for s in aug.segment_trajectory(traj):
                if s.state == aug.HOLD:
                    hold_frames.update(range(s.start, s.end))
            new_obj = [
                (t_o @ p) if t in hold_frames else p
                for t, p in enumerate(clip.object_poses)
            ]
        episodes.append(
            build_episode(
                f"{clip.manifest.clip_id}__aug{i}",
                at,
                new_obj,
                {"source_clip": clip.manifest.clip_id,
                 "augmentation": [f"hold_transform:{i}"], "seed": cfg.seed},
            )
        )

    for ep in episodes:
        write_episode(out_dir, ep)
    return episodes


@dataclass
class PipelineSummary:
    episodes: int = 0
    feasible: int = 0
    clips_ok: int = 0
    clips_failed: int = 0
    failures: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "feasible_episodes": self.feasible,
            "clips_ok": self.clips_ok,
            "clips_failed": self.clips_failed,
            "failures": self.failures,
        }


def run_pipeline(manifest_paths: Sequence[Path], cfg: PipelineConfig, out_dir: Path) -> PipelineSummary:
    """Process every clip, isolate per-clip failures, write a summary."""
    out_dir = Path(out_dir)
    summary = PipelineSummary()
    results: dict[str, list[EpisodeRecord]] = {}

    def worker(path: Path):
        clip = hio.load_clip(path)
        return clip.manifest.clip_id, process_clip(clip, cfg, out_dir)

    paths = [Path(p) for p in manifest_paths]
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as ex:
            futures = {p: ex.submit(worker, p) for p in paths}
            outcomes = [(p, futures[p]) for p in paths]
    else:
        outcomes = []
        for p in paths:
            outcomes.append((p, _Immediate(worker, p)))

    rows = []
    for p, fut in outcomes:
        try:
            clip_id, eps = fut.result()
        except Exception as e:  # per-clip isolation
            log.error("clip %s failed: %s", p, e)
            log.debug("%s", traceback.format_exc())
            summary.clips_failed += 1
            summary.failures[str(p)] = f"{type(e).__name__}: {e}"
            continue
        summary.clips_ok += 1
        results[clip_id] = eps
        for ep in eps:
            summary.episodes += 1
            summary.feasible += int(ep.feasible)
            m = ep.metrics.to_dict()
            rows.append({"episode_id": ep.episode_id, "feasible": ep.feasible, **m})

    hio.write_json(out_dir / "summary.json", summary.to_dict())
    buf = _io.StringIO()
    fieldnames = ["episode_id", "feasible", "chamfer_cm", "f5_pct", "f10_pct",
                  "jitter_cm_s2", "rel_trans_std_cm", "rel_rot_std_deg", "fps"]
    writer = csv.DictWriter(buf, fieldnames=fieldnames)
    writer.writeheader()
    for row in sorted(rows, key=lambda r: r["episode_id"]):
        writer.writerow(row)
    hio.atomic_write_text(out_dir / "metrics.csv", buf.getvalue())
    return summary


class _Immediate:
    """Sequential stand-in for a Future."""

    def __init__(self, fn, *args):
        try:
            self._value = fn(*args)
            self._exc = None
        except Exception as e:
            self._exc = e

    def result(self):
        if self._exc is not None:
            raise self._exc
        return self._value

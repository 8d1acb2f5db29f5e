"""Command-line front end.

Subcommands mirror the pipeline stages so each is independently testable:
canonicalize, retarget, check, augment, replay, metrics, run.  Exit codes:
0 success, 1 total failure, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from . import io as hio
from . import kinematics as kin
from . import metrics as met
from . import pipeline as pipe
from . import plausibility as plaus
from . import retarget as ret
from .geom import Pose, Rot3, so3_exp

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _load_cfg(args) -> pipe.PipelineConfig:
    path = Path(args.config) if args.config else None
    data = hio.load_config(path)
    cfg = pipe.PipelineConfig.from_dict(data, path.parent if path else Path.cwd())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.robot:
        cfg.robots = [r for r in cfg.robots if r.name in args.robot]
        missing = set(args.robot) - {r.name for r in cfg.robots}
        if missing:
            raise ValueError(f"robots not in config: {sorted(missing)}")
    return cfg


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    manifests = [Path(p) for p in args.manifests]
    if not manifests:
        log.warning("no clips given; nothing to do")
        return EXIT_OK
    summary = pipe.run_pipeline(manifests, cfg, Path(args.out))
    print(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    if summary.clips_ok == 0 and summary.clips_failed > 0:
        return EXIT_FAILURE
    return EXIT_OK


def cmd_canonicalize(args) -> int:
    clip = hio.load_clip(Path(args.manifest))
    clip, ct = pipe.canonicalize_clip(clip)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hio.save_hand_stream(out / "hand.jsonl", clip.hand_frames)
    if clip.object_poses is not None:
        hio.save_pose_stream(out / "object_poses.jsonl", clip.object_poses)
    info = {"canonicalized": ct is not None}
    if ct is not None:
        info["t0"] = ct.t0
        info["t_w_to_A"] = hio.pose_to_json(ct.t_w_to_A)
    hio.write_json(out / "canonical.json", info)
    return EXIT_OK


def cmd_retarget(args) -> int:
    cfg = _load_cfg(args)
    clip = hio.load_clip(Path(args.manifest))
    rcfg = ret.RetargetConfig(
        exemplars=cfg.exemplars,
        d_z=cfg.d_z,
        gesture_override=cfg.gesture_override if (cfg.gesture_override or cfg.exemplars) else ret.WHOLE_HAND,
    )
    traj = ret.retarget_trajectory(clip.hand_frames, clip.tracks, rcfg)
    hio.save_trajectory(Path(args.out), traj)
    print(f"retargeted {len(traj)} frames (gesture: {traj.gesture})")
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = _load_cfg(args)
    clip = hio.load_clip(Path(args.manifest))
    if clip.mesh is None:
        print("no mesh in manifest; nothing to check", file=sys.stderr)
        return EXIT_CONFIG
    traj = hio.load_trajectory(Path(args.trajectory))
    traj, summary = pipe.check_penetration(clip, traj, cfg.voxel, cfg.resolve_penetration)
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.out:
        hio.save_trajectory(Path(args.out), traj)
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = _load_cfg(args)
    traj = hio.load_trajectory(Path(args.trajectory))
    rng = np.random.default_rng(cfg.seed)
    if args.mode == "mirror":
        obj = hio.load_pose_stream(Path(args.object_poses)) if args.object_poses else [Pose.identity()] * len(traj)
        res = aug.mirror_trajectory(traj, obj, aug.MirrorSpec(cfg.tau_screw))
        if res.rejected:
            print(f"mirror rejected: {res.reject_reason}", file=sys.stderr)
            return EXIT_FAILURE
        out_traj = ret.GripperTrajectory(res.hand, list(traj.commands), traj.widths, traj.gesture)
    else:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        t_o = Pose(
            Rot3(so3_exp(axis * min(cfg.hold_transform_rot, cfg.rotation_cap))),
            direction * cfg.hold_transform_trans,
        )
        out_traj = aug.augment_trajectory(traj, t_o, cfg.rotation_cap)
    hio.save_trajectory(Path(args.out), out_traj)
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = _load_cfg(args)
    if not cfg.robots:
        print("no robots registered in config", file=sys.stderr)
        return EXIT_CONFIG
    traj = hio.load_trajectory(Path(args.trajectory))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    any_feasible = False
    for robot in cfg.robots:
        try:
            configs, rep = kin.replay_trajectory(robot.chain, traj.poses, robot.q0)
        except kin.IkError as e:
            configs, rep = [], kin.ReplayReport([], [], [], 0.0, False, 0, str(e))
        hio.write_jsonl(out / f"joints_{robot.name}.jsonl", ({"q": [float(x) for x in q]} for q in configs))
        hio.write_json(out / f"replay_{robot.name}.json", pipe._report_to_dict(rep))
        any_feasible = any_feasible or rep.feasible
        print(f"{robot.name}: {'feasible' if rep.feasible else 'infeasible'} ({len(configs)} frames)")
    return EXIT_OK if any_feasible else EXIT_FAILURE


def cmd_metrics(args) -> int:
    traj = hio.load_trajectory(Path(args.trajectory))
    obj = hio.load_pose_stream(Path(args.object_poses)) if args.object_poses else None
    report = met.MetricReport(fps=args.fps)
    positions = np.array([p.trans for p in traj.poses])
    if len(positions) >= 3:
        report.jitter_cm_s2 = met.hand_jitter(positions, args.fps)
    if obj is not None:
        ts, rs = met.rel_pose_consistency(traj.poses, obj)
        report.rel_trans_std_cm = ts
        report.rel_rot_std_deg = rs
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if args.out:
        hio.write_json(Path(args.out), report.to_dict())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hoi2robot", description=__doc__)
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--robot", action="append", help="restrict to this robot (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("run", help="full pipeline over a batch of clips")
    sp.add_argument("manifests", nargs="*")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("canonicalize", help="lift one clip to the canonical action space")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_canonicalize)

    sp = sub.add_parser("retarget", help="hand stream -> gripper trajectory")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_retarget)

    sp = sub.add_parser("check", help="penetration check a trajectory against the clip mesh")
    sp.add_argument("manifest")
    sp.add_argument("trajectory")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_check)

    sp = sub.add_parser("augment", help="augment a gripper trajectory")
    sp.add_argument("trajectory")
    sp.add_argument("--mode", choices=["hold", "mirror"], default="hold")
    sp.add_argument("--object-poses")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_augment)

    sp = sub.add_parser("replay", help="IK replay a trajectory on registered robots")
    sp.add_argument("trajectory")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_replay)

    sp = sub.add_parser("metrics", help="quality metrics for a trajectory")
    sp.add_argument("trajectory")
    sp.add_argument("--object-poses")
    sp.add_argument("--fps", type=float, default=30.0)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except (hio.ManifestError, kin.ChainParseError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

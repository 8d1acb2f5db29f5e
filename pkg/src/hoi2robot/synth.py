"""Deterministic synthetic fixtures: meshes, a 6-DoF test arm, and a full
pick-style clip whose gripper poses are generated from the arm's own forward
kinematics (so replay is feasible by construction).
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import io as hio
from .geom import Pose, Rot3, so3_exp
from .kinematics import KinematicChain, fk, parse_chain
from .plausibility import TriMesh
from .retarget import KP, HandFrame, KeypointTrack, gripper_pose_wholehand

ARM6_XML = """<robot name="arm6">
  <link name="base"/>
  <link name="l1"/><link name="l2"/><link name="l3"/>
  <link name="l4"/><link name="l5"/><link name="l6"/>
  <link name="tool"/>
  <joint name="j1" type="revolute">
    <parent link="base"/><child link="l1"/>
    <origin xyz="0 0 0.1"/><axis xyz="0 0 1"/>
    <limit lower="-2.9" upper="2.9"/>
  </joint>
  <joint name="j2" type="revolute">
    <parent link="l1"/><child link="l2"/>
    <origin xyz="0 0 0.1"/><axis xyz="0 1 0"/>
    <limit lower="-2.0" upper="2.0"/>
  </joint>
  <joint name="j3" type="revolute">
    <parent link="l2"/><child link="l3"/>
    <origin xyz="0 0 0.3"/><axis xyz="0 1 0"/>
    <limit lower="-2.0" upper="2.0"/>
  </joint>
  <joint name="j4" type="revolute">
    <parent link="l3"/><child link="l4"/>
    <origin xyz="0 0 0.25"/><axis xyz="0 0 1"/>
    <limit lower="-2.9" upper="2.9"/>
  </joint>
  <joint name="j5" type="revolute">
    <parent link="l4"/><child link="l5"/>
    <origin xyz="0 0 0.05"/><axis xyz="0 1 0"/>
    <limit lower="-2.0" upper="2.0"/>
  </joint>
  <joint name="j6" type="revolute">
    <parent link="l5"/><child link="l6"/>
    <origin xyz="0 0 0.05"/><axis xyz="0 0 1"/>
    <limit lower="-2.9" upper="2.9"/>
  </joint>
  <joint name="ee" type="fixed">
    <parent link="l6"/><child link="tool"/>
    <origin xyz="0 0 0.08"/>
  </joint>
</robot>
"""

PLANAR_2R_XML = """<robot name="planar2r">
  <link name="base"/><link name="l1"/><link name="l2"/><link name="tool"/>
  <joint name="j1" type="revolute">
    <parent link="base"/><child link="l1"/>
    <origin xyz="0 0 0"/><axis xyz="0 0 1"/>
    <limit lower="-3.14159265" upper="3.14159265"/>
  </joint>
  <joint name="j2" type="revolute">
    <parent link="l1"/><child link="l2"/>
    <origin xyz="1 0 0"/><axis xyz="0 0 1"/>
    <limit lower="-3.14159265" upper="3.14159265"/>
  </joint>
  <joint name="ee" type="fixed">
    <parent link="l2"/><child link="tool"/>
    <origin xyz="1 0 0"/>
  </joint>
</robot>
"""


def make_arm6() -> KinematicChain:
    return parse_chain(ARM6_XML, "base", "tool")


def make_planar_2r() -> KinematicChain:
    return parse_chain(PLANAR_2R_XML, "base", "tool")


def icosphere(radius: float = 0.05, subdivisions: int = 2) -> TriMesh:
    """Watertight icosphere with outward-wound triangles."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key in cache:
                return cache[key]
            m = np.array(verts[a]) + np.array(verts[b])
            m /= np.linalg.norm(m)
            verts.append(tuple(m))
            cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriMesh(np.array(verts) * radius, np.array(faces, dtype=np.int64))


def box_mesh(half_extents=(0.5, 0.5, 0.5), center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Watertight axis-aligned box (12 triangles, outward winding)."""
    hx, hy, hz = half_extents
    c = np.asarray(center, dtype=np.float64)
    v = np.array(
        [
            [-hx, -hy, -hz], [hx, -hy, -hz], [hx, hy, -hz], [-hx, hy, -hz],
            [-hx, -hy, hz], [hx, -hy, hz], [hx, hy, hz], [-hx, hy, hz],
        ]
    ) + c
    f = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # bottom (-z)
            [4, 5, 6], [4, 6, 7],  # top (+z)
            [0, 1, 5], [0, 5, 4],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [1, 2, 6], [1, 6, 5],  # +x
            [3, 0, 4], [3, 4, 7],  # -x
        ],
        dtype=np.int64,
    )
    return TriMesh(v, f)


def hand_template() -> np.ndarray:
    """Flat right-hand keypoint template (wrist at the origin, meters)."""
    kp = np.zeros((21, 3))
    kp[KP["wrist"]] = (0, 0, 0)
    kp[KP["thumb_cmc"]] = (0.030, 0.020, 0.000)
    kp[KP["thumb_mcp"]] = (0.050, 0.045, 0.005)
    kp[KP["thumb_ip"]] = (0.060, 0.065, 0.010)
    kp[KP["thumb_tip"]] = (0.065, 0.085, 0.015)
    kp[KP["index_mcp"]] = (0.030, 0.090, 0.000)
    kp[KP["index_pip"]] = (0.035, 0.115, 0.000)
    kp[KP["index_dip"]] = (0.040, 0.135, 0.000)
    kp[KP["index_tip"]] = (0.045, 0.150, 0.000)
    kp[KP["middle_mcp"]] = (0.010, 0.095, 0.000)
    kp[KP["middle_pip"]] = (0.010, 0.125, 0.000)
    kp[KP["middle_dip"]] = (0.010, 0.148, 0.000)
    kp[KP["middle_tip"]] = (0.010, 0.168, 0.000)
    kp[KP["ring_mcp"]] = (-0.010, 0.090, 0.000)
    kp[KP["ring_pip"]] = (-0.012, 0.118, 0.000)
    kp[KP["ring_dip"]] = (-0.014, 0.138, 0.000)
    kp[KP["ring_tip"]] = (-0.016, 0.155, 0.000)
    kp[KP["pinky_mcp"]] = (-0.030, 0.080, 0.000)
    kp[KP["pinky_pip"]] = (-0.035, 0.100, 0.000)
    kp[KP["pinky_dip"]] = (-0.040, 0.115, 0.000)
    kp[KP["pinky_tip"]] = (-0.045, 0.128, 0.000)
    return kp


def pinch_template() -> np.ndarray:
    """Pinch-gesture variant: index and thumb tips brought together."""
    kp = hand_template().copy()
    kp[KP["index_tip"]] = (0.050, 0.120, 0.020)
    kp[KP["index_dip"]] = (0.045, 0.115, 0.010)
    kp[KP["thumb_tip"]] = (0.052, 0.118, 0.022)
    kp[KP["thumb_ip"]] = (0.055, 0.095, 0.015)
    return kp


def smooth_joint_path(chain: KinematicChain, n_frames: int, amplitude: float = 0.35) -> np.ndarray:
    """Sinusoidal per-joint path comfortably inside the limits."""
    mid = 0.5 * (chain.lower + chain.upper)
    base = np.minimum(amplitude, 0.4 * (chain.upper - chain.lower))
    t = np.linspace(0.0, 1.0, n_frames)
    q = np.empty((n_frames, chain.n))
    for i in range(chain.n):
        q[:, i] = mid[i] + base[i] * np.sin(2 * math.pi * (0.5 + 0.13 * i) * t + 0.7 * i)
    return q


def random_pose(rng: np.random.Generator, trans_scale: float = 1.0) -> Pose:
    w = rng.normal(size=3)
    n = np.linalg.norm(w)
    angle = rng.uniform(0, math.pi * 0.95)
    return Pose(Rot3(so3_exp(w / n * angle)), rng.normal(size=3) * trans_scale)


def write_fixture(root: Path, n_frames: int = 150) -> Path:
    """Write a complete synthetic clip + config; returns the manifest path.

    Gripper poses are driven by a smooth joint path on the bundled 6-DoF arm,
    and the hand keypoints are placed so that whole-hand retargeting
    reproduces those poses exactly, keeping replay feasible.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    chain = make_arm6()
    qs = smooth_joint_path(chain, n_frames, amplitude=0.25)
    ee_poses = [fk(chain, q) for q in qs]

    template = hand_template()
    palm0 = gripper_pose_wholehand(HandFrame(template), d_z=0.0, sign=1)
    to_palm = palm0.inverse()

    hand_frames = []
    for pose in ee_poses:
        kp = pose.apply(to_palm.apply(template))
        hand_frames.append(HandFrame(kp, "right"))

    # object: static, then rigidly attached to the gripper, then static again
    grasp_a, grasp_b = n_frames // 3, 2 * n_frames // 3
    obj_rel = Pose(Rot3.identity(), np.array([0.0, 0.0, 0.12]))
    obj_start = ee_poses[grasp_a] @ obj_rel
    obj_poses = []
    for t in range(n_frames):
        if t < grasp_a:
            obj_poses.append(obj_start)
        elif t < grasp_b:
            obj_poses.append(ee_poses[t] @ (ee_poses[grasp_a].inverse() @ obj_start))
        else:
            obj_poses.append(obj_poses[grasp_b - 1])

    # tracked object keypoints: 8 surface points following the object pose
    mesh = icosphere(radius=0.04, subdivisions=1)
    rng = np.random.default_rng(42)
    surf = mesh.sample_surface(8, rng)
    positions = np.stack([p.apply(surf) for p in obj_poses])
    track = KeypointTrack(positions, np.ones(positions.shape[:2], dtype=bool))

    hio.save_hand_stream(root / "hand.jsonl", hand_frames)
    hio.save_pose_stream(root / "object_poses.jsonl", obj_poses)
    hio.save_track(root / "tracks.jsonl", track)
    hio.save_obj(root / "object.obj", mesh)
    hio.write_json(
        root / "exemplars.json",
        [
            {"label": "whole_hand", "joints": [[float(x) for x in r] for r in hand_template()]},
            {"label": "finger_only", "joints": [[float(x) for x in r] for r in pinch_template()]},
        ],
    )
    hio.atomic_write_text(root / "robot.xml", ARM6_XML)
    hio.atomic_write_text(
        root / "config.toml",
        "\n".join(
            [
                "canonicalize = false",
                "seed = 7",
                'exemplars = "exemplars.json"',
                # the clip's hand frames are rigidly rotated copies of the
                # template; the kNN features are deliberately not rotation
                # invariant, so pin the gesture for this fixture
                'gesture_override = "whole_hand"',
                "mirror = true",
                "n_augments = 1",
                "hold_transform_trans = 0.02",
                "hold_transform_rot = 0.05",
                "",
                "[[robots]]",
                'name = "arm6"',
                'xml = "robot.xml"',
                'root_link = "base"',
                'ee_link = "tool"',
                "",
            ]
        ),
    )
    manifest = {
        "schema_version": hio.SCHEMA_VERSION,
        "clip_id": "synth_pick_000",
        "fps": 30.0,
        "hand_stream": "hand.jsonl",
        "object_pose_stream": "object_poses.jsonl",
        "keypoint_tracks": "tracks.jsonl",
        "mesh": "object.obj",
        "notes": "synthetic fixture",
    }
    hio.write_json(root / "manifest.json", manifest)
    return root / "manifest.json"

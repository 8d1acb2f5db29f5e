"""Hand keypoints to parallel-jaw gripper poses and open/close commands.

Two pose constructions are used per clip: a palm-frame build for whole-hand
grasps and an index-thumb chord build for pinch grasps.  A kNN gesture
classifier picks one per clip, and gripper state comes from the motion of
tracked object keypoints (stationary points mean the gripper is open).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geom import DegenerateGeometryError, Pose, Rot3, so3_exp

log = logging.getLogger(__name__)

# Standard 21-landmark ordering: wrist, then 4 joints per finger
# (thumb: cmc/mcp/ip/tip, others: mcp/pip/dip/tip).
KEYPOINT_NAMES = (
    "wrist",
    "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip",
)
KP = {name: i for i, name in enumerate(KEYPOINT_NAMES)}

_BONES = [(0, 1), (1, 2), (2, 3), (3, 4),
          (0, 5), (5, 6), (6, 7), (7, 8),
          (0, 9), (9, 10), (10, 11), (11, 12),
          (0, 13), (13, 14), (14, 15), (15, 16),
          (0, 17), (17, 18), (18, 19), (19, 20)]
BONE_MIN_M = 0.005
BONE_MAX_M = 0.12

WHOLE_HAND = "whole_hand"
FINGER_ONLY = "finger_only"

OPEN = "open"
CLOSED = "closed"

MAX_INTERP_GAP = 3


@dataclass(frozen=True)
class HandFrame:
    """One timestep of hand state: 21 keypoints plus handedness."""

    keypoints: np.ndarray  # (21, 3) meters, world frame
    handedness: str = "right"
    wrist_pose: Optional[Pose] = None

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64).reshape(21, 3)
        if not np.all(np.isfinite(kp)):
            raise ValueError("non-finite keypoints")
        if self.handedness not in ("left", "right"):
            raise ValueError(f"bad handedness {self.handedness!r}")
        object.__setattr__(self, "keypoints", kp)
        kp.setflags(write=False)

    def kp(self, name: str) -> np.ndarray:
        return self.keypoints[KP[name]]

    def validate_bones(self) -> None:
        lengths = np.linalg.norm(
            self.keypoints[[b for _, b in _BONES]] - self.keypoints[[a for a, _ in _BONES]],
            axis=1,
        )
        bad = (lengths < BONE_MIN_M) | (lengths > BONE_MAX_M)
        if np.any(bad):
            raise ValueError(
                f"implausible bone lengths (m): {lengths[bad]} at bones "
                f"{[b for b, m in zip(_BONES, bad) if m]}"
            )


@dataclass(frozen=True)
class GripperFrame:
    pose: Pose
    command: str  # OPEN / CLOSED
    width: Optional[float] = None

    def __post_init__(self):
        if self.command not in (OPEN, CLOSED):
            raise ValueError(f"bad command {self.command!r}")
        if self.width is not None and not (0.0 <= self.width <= 0.12):
            raise ValueError(f"width {self.width} out of [0, 0.12]")


@dataclass
class GripperTrajectory:
    """End-effector pose and command per frame."""

    poses: list[Pose]
    commands: list[str]
    widths: Optional[list[Optional[float]]] = None
    gesture: Optional[str] = None
    interpolated: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.poses)

    def frames(self) -> list[GripperFrame]:
        widths = self.widths or [None] * len(self.poses)
        return [GripperFrame(p, c, w) for p, c, w in zip(self.poses, self.commands, widths)]


@dataclass(frozen=True)
class KeypointTrack:
    """Tracked object keypoints: (T, N, D) positions with validity flags."""

    positions: np.ndarray  # (T, N, 2|3), pixels or meters
    valid: np.ndarray  # (T, N) bool

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 3 or pos.shape[2] not in (2, 3):
            raise ValueError(f"positions must be (T, N, 2|3), got {pos.shape}")
        val = np.asarray(self.valid, dtype=bool)
        if val.shape != pos.shape[:2]:
            raise ValueError("valid flags shape mismatch")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "valid", val)

    @property
    def dim(self) -> int:
        return self.positions.shape[2]


def gesture_features(frame: HandFrame) -> np.ndarray:
    """Wrist-centered, span-normalized keypoints flattened to 63 floats."""
    kp = frame.keypoints
    span = np.linalg.norm(kp[KP["middle_mcp"]] - kp[KP["wrist"]])
    if span <= 1e-9:
        raise DegenerateGeometryError("zero hand span")
    return ((kp - kp[KP["wrist"]]) / span).ravel()


@dataclass(frozen=True)
class GestureExemplar:
    label: str
    features: np.ndarray

    def __post_init__(self):
        if self.label not in (WHOLE_HAND, FINGER_ONLY):
            raise ValueError(f"bad gesture label {self.label!r}")
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64).ravel())


def classify_gesture(frame: HandFrame, exemplars: Sequence[GestureExemplar], k: int = 3) -> str:
    """Majority label among the k nearest exemplars (Euclidean distance)."""
    if not exemplars:
        raise ValueError("empty exemplar set")
    k = min(k, len(exemplars))
    feat = gesture_features(frame)
    dists = np.array([np.linalg.norm(feat - e.features) for e in exemplars])
    order = np.argsort(dists, kind="stable")[:k]
    votes = sum(1 if exemplars[i].label == WHOLE_HAND else -1 for i in order)
    return WHOLE_HAND if votes > 0 else FINGER_ONLY


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(v)
    if n <= 1e-8:
        raise DegenerateGeometryError(what)
    return v / n


def gripper_pose_wholehand(frame: HandFrame, d_z: float = 0.0, sign: Optional[int] = None) -> Pose:
    """Palm-frame gripper pose from wrist, index MCP, and ring MCP.

    x runs wrist-to-ring-MCP, z is the palm normal flipped by `sign`
    (defaults to +1 for right hands, -1 for left), y completes the frame.
    """
    if sign is None:
        sign = 1 if frame.handedness == "right" else -1
    w = frame.kp("wrist")
    i = frame.kp("index_mcp")
    r = frame.kp("ring_mcp")
    vz = np.cross(i - w, r - w)
    if np.linalg.norm(vz) <= 1e-8:
        raise DegenerateGeometryError("degenerate palm: wrist/index-MCP/ring-MCP collinear")
    o = (w + i + r) / 3.0
    x = _unit(r - w, "degenerate palm: wrist coincides with ring MCP")
    z = sign * _unit(vz, "degenerate palm")
    y = np.cross(z, x)
    # Gram-Schmidt keeping x exact; z is re-derived to guarantee orthonormality
    y = _unit(y - np.dot(y, x) * x, "degenerate palm frame")
    z = np.cross(x, y)
    rot = Rot3.from_columns(x, y, z)
    return Pose(rot, o + d_z * z)


def gripper_pose_fingeronly(frame: HandFrame, sign: int = 1) -> Pose:
    """Pinch gripper pose from the index-thumb chord.

    z runs along the index finger (MCP to tip), y is normal to the
    index/thumb plane, x completes the frame; position is the midpoint of the
    thumb and index tips.
    """
    itip = frame.kp("index_tip")
    imcp = frame.kp("index_mcp")
    ttip = frame.kp("thumb_tip")
    tmcp = frame.kp("thumb_mcp")
    vz = itip - imcp
    vy = np.cross(vz, imcp - tmcp)
    if np.linalg.norm(vz) <= 1e-8:
        raise DegenerateGeometryError("degenerate pinch: index tip coincides with index MCP")
    if np.linalg.norm(vy) <= 1e-8:
        raise DegenerateGeometryError("degenerate pinch: index and thumb segments collinear")
    o = 0.5 * (ttip + itip)
    z = sign * _unit(vz, "degenerate pinch")
    y = _unit(vy, "degenerate pinch")
    # Gram-Schmidt keeping z exact
    y = _unit(y - np.dot(y, z) * z, "degenerate pinch frame")
    x = np.cross(y, z)
    rot = Rot3.from_columns(x, y, z)
    return Pose(rot, o)


def detect_gripper_state(
    tracks: KeypointTrack,
    window: int = 5,
    threshold: Optional[float] = None,
    hysteresis: int = 3,
) -> list[str]:
    """Per-frame open/closed from keypoint displacement over a trailing window.

    A frame is closed when the mean displacement of keypoints valid at both
    ends of the window exceeds the threshold; state flips only after the new
    raw state persists for `hysteresis` frames.  Default thresholds: 0.005 m
    for 3D tracks, 2.0 px for 2D.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    if threshold is None:
        threshold = 0.005 if tracks.dim == 3 else 2.0
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    T = tracks.positions.shape[0]
    raw: list[str] = []
    for t in range(T):
        t0 = t - window
        if t0 < 0:
            raw.append(raw[-1] if raw else OPEN)
            continue
        both = tracks.valid[t] & tracks.valid[t0]
        if not np.any(both):
            raw.append(raw[-1] if raw else OPEN)
            continue
        disp = np.linalg.norm(tracks.positions[t, both] - tracks.positions[t0, both], axis=1)
        raw.append(CLOSED if disp.mean() > threshold else OPEN)

    states: list[str] = []
    current = OPEN
    run = 0
    for t, r in enumerate(raw):
        if r != current:
            run += 1
            if run >= hysteresis:
                current = r
                run = 0
        else:
            run = 0
        states.append(current)
    return states


def interpolate_pose(a: Pose, b: Pose, alpha: float) -> Pose:
    """Linear translation + geodesic rotation interpolation."""
    trans = (1 - alpha) * a.trans + alpha * b.trans
    w = (a.rot.inverse().compose(b.rot)).log()
    rot = a.rot.compose(Rot3(so3_exp(alpha * w)))
    return Pose(rot, trans)


@dataclass
class RetargetConfig:
    exemplars: Sequence[GestureExemplar] = ()
    k: int = 3
    d_z: float = 0.0
    sign: Optional[int] = None
    window: int = 5
    threshold: Optional[float] = None
    hysteresis: int = 3
    gesture_override: Optional[str] = None


def retarget_trajectory(
    frames: Sequence[HandFrame],
    tracks: Optional[KeypointTrack],
    config: RetargetConfig,
) -> GripperTrajectory:
    """Full clip retargeting: one gesture per clip, per-frame pose, commands.

    Frames whose pose construction is degenerate become gaps; gaps up to 3
    frames are interpolated from their neighbors, longer ones are an error.
    """
    if not frames:
        raise ValueError("empty clip")
    if config.gesture_override is not None:
        gesture = config.gesture_override
    else:
        labels = [classify_gesture(f, config.exemplars, config.k) for f in frames]
        gesture = WHOLE_HAND if labels.count(WHOLE_HAND) * 2 >= len(labels) else FINGER_ONLY

    poses: list[Optional[Pose]] = []
    for f in frames:
        try:
            if gesture == WHOLE_HAND:
                poses.append(gripper_pose_wholehand(f, config.d_z, config.sign))
            else:
                poses.append(gripper_pose_fingeronly(f))
        except DegenerateGeometryError:
            poses.append(None)

    interpolated = _fill_gaps(poses)
    if interpolated:
        log.warning("interpolated %d degenerate frame(s): %s", len(interpolated), interpolated)

    if tracks is not None:
        commands = detect_gripper_state(tracks, config.window, config.threshold, config.hysteresis)
        if len(commands) != len(frames):
            raise ValueError(
                f"track length {len(commands)} != hand stream length {len(frames)}"
            )
    else:
        commands = [OPEN] * len(frames)

    return GripperTrajectory(
        poses=[p for p in poses if p is not None],
        commands=commands,
        gesture=gesture,
        interpolated=interpolated,
    )


def _fill_gaps(poses: list[Optional[Pose]]) -> list[int]:
    """Interpolate None gaps of length <= MAX_INTERP_GAP in place."""
    filled: list[int] = []
    t = 0
    n = len(poses)
    while t < n:
        if poses[t] is not None:
            t += 1
            continue
        start = t
        while t < n and poses[t] is None:
            t += 1
        gap = t - start
        if gap > MAX_INTERP_GAP:
            raise DegenerateGeometryError(f"degenerate gap of {gap} frames at {start}")
        left = poses[start - 1] if start > 0 else None
        right = poses[t] if t < n else None
        if left is None and right is None:
            raise DegenerateGeometryError("whole clip degenerate")
        for j in range(start, t):
            if left is None:
                poses[j] = right
            elif right is None:
                poses[j] = left
            else:
                alpha = (j - start + 1) / (gap + 1)
                poses[j] = interpolate_pose(left, right, alpha)
            filled.append(j)
    return filled

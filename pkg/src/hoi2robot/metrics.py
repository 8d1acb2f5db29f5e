"""Trajectory and reconstruction quality metrics.

Report units follow the usual benchmark conventions: chamfer in cm,
F-scores in percent, jitter in cm/s^2, relative-pose spread in cm and
degrees.  Everything upstream stays in SI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geom import Pose, so3_log_matrix


@dataclass
class MetricReport:
    chamfer_cm: Optional[float] = None
    f5_pct: Optional[float] = None
    f10_pct: Optional[float] = None
    jitter_cm_s2: Optional[float] = None
    rel_trans_std_cm: Optional[float] = None
    rel_rot_std_deg: Optional[float] = None
    fps: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def fscore(pred: np.ndarray, gt: np.ndarray, threshold: float) -> float:
    """F-score in percent at a distance threshold (precision vs recall)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("empty point set")
    d_pg, _ = cKDTree(gt).query(pred)
    d_gp, _ = cKDTree(pred).query(gt)
    precision = float(np.mean(d_pg <= threshold))
    recall = float(np.mean(d_gp <= threshold))
    if precision + recall == 0:
        return 0.0
    return 200.0 * precision * recall / (precision + recall)


def hand_jitter(wrist_positions: np.ndarray, fps: float) -> float:
    """Mean second-difference acceleration magnitude, in cm/s^2."""
    p = np.asarray(wrist_positions, dtype=np.float64).reshape(-1, 3)
    if len(p) < 3:
        raise ValueError("need at least 3 frames")
    if fps <= 0:
        raise ValueError("fps must be positive")
    acc = (p[2:] - 2 * p[1:-1] + p[:-2]) * fps * fps
    return float(np.mean(np.linalg.norm(acc, axis=1))) * 100.0


def chordal_mean_rotation(rots: Sequence[np.ndarray]) -> np.ndarray:
    """Rotation closest (chordal metric) to the mean of the matrices."""
    M = np.mean(np.stack(rots), axis=0)
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return R


def rel_pose_consistency(hand: Sequence[Pose], obj: Sequence[Pose]) -> tuple[float, float]:
    """Spread of the hand-object relative pose over time.

    Translation: RMS deviation from the mean relative translation (root of
    the summed per-axis variances), in cm.  Rotation: RMS geodesic angle to
    the chordal-mean relative rotation, in degrees.
    """
    if len(hand) != len(obj):
        raise ValueError(f"stream length mismatch: {len(hand)} vs {len(obj)}")
    if len(hand) < 2:
        raise ValueError("need at least 2 frames")
    rel = [h.inverse() @ o for h, o in zip(hand, obj)]
    trans = np.array([r.trans for r in rel])
    var = trans.var(axis=0)
    std_trans_cm = math.sqrt(float(var.sum())) * 100.0

    mean_rot = chordal_mean_rotation([r.rot.m for r in rel])
    angles = [np.linalg.norm(so3_log_matrix(mean_rot.T @ r.rot.m)) for r in rel]
    std_rot_deg = math.degrees(math.sqrt(float(np.mean(np.square(angles)))))
    return std_trans_cm, std_rot_deg

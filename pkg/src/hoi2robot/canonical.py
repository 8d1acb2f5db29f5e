"""World-frame lifting and canonical action-space normalization.

The canonical frame puts the scene up direction on z, the dominant
hand-to-object approach direction on y, and completes x by the right-hand
rule; trajectories are centered at the object position of the first salient
frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geom import Aabb, DegenerateGeometryError, Pose, Rot3

log = logging.getLogger(__name__)

SALIENT_DISTANCE_M = 0.15
APPROACH_PERCENTILE = 25.0


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")


@dataclass(frozen=True)
class BodyAnchors:
    """World-frame body joints plus the up / approach directions."""

    hip_left: np.ndarray
    hip_right: np.ndarray
    shoulder_left: np.ndarray
    shoulder_right: np.ndarray
    up: np.ndarray
    approach: np.ndarray

    def __post_init__(self):
        for name in ("hip_left", "hip_right", "shoulder_left", "shoulder_right"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        up = np.asarray(self.up, dtype=np.float64).reshape(3)
        ap = np.asarray(self.approach, dtype=np.float64).reshape(3)
        nu, na = np.linalg.norm(up), np.linalg.norm(ap)
        if nu == 0 or na == 0:
            raise ValueError("up/approach must be non-zero")
        up, ap = up / nu, ap / na
        cross = np.linalg.norm(np.cross(up, ap))
        if cross <= 1e-3:
            raise DegenerateGeometryError("degenerate frame: approach parallel to up")
        object.__setattr__(self, "up", up)
        object.__setattr__(self, "approach", ap)

    def lateral_hint(self) -> np.ndarray:
        """Left-right body vector projected on the plane orthogonal to up."""
        v = (self.hip_left - self.hip_right) + (self.shoulder_left - self.shoulder_right)
        v = v - np.dot(v, self.up) * self.up
        return v


@dataclass(frozen=True)
class CanonicalTransform:
    t_w_to_A: Pose
    t0: int


def backproject(depth: np.ndarray, mask: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Pinhole back-projection of masked depth pixels to camera-frame points."""
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if depth.shape != mask.shape:
        raise ValueError(f"depth shape {depth.shape} != mask shape {mask.shape}")
    valid = mask & np.isfinite(depth) & (depth > 0)
    v, u = np.nonzero(valid)
    d = depth[v, u]
    x = (u - cam.cx) * d / cam.fx
    y = (v - cam.cy) * d / cam.fy
    return np.column_stack([x, y, d])


def recover_scale(points: np.ndarray, unscaled_mesh_aabb: Aabb) -> float:
    """Metric scale from the ratio of observed and mesh AABB diagonals."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] < 2:
        raise DegenerateGeometryError("degenerate observation: need >= 2 points")
    obs = Aabb.from_points(points)
    if obs.diagonal <= 0:
        raise DegenerateGeometryError("degenerate observation: zero-diagonal point set")
    if unscaled_mesh_aabb.diagonal <= 0:
        raise DegenerateGeometryError("mesh AABB has zero diagonal")
    return obs.diagonal / unscaled_mesh_aabb.diagonal


def build_canonical_frame(
    anchors: BodyAnchors,
    object_pos_t0,
    t0: int = 0,
    lateral_hint: Optional[np.ndarray] = None,
) -> CanonicalTransform:
    """Canonical frame: z = up, y = approach projected off z, x = y cross z.

    When a lateral hint vector is supplied and the constructed x axis
    anti-aligns with it, x and y are both negated (a pi turn about z) so the
    body left-right direction keeps a consistent sign.
    """
    z = anchors.up
    y = anchors.approach - np.dot(anchors.approach, z) * z
    ny = np.linalg.norm(y)
    if ny <= 1e-9:
        raise DegenerateGeometryError("degenerate frame: approach parallel to up")
    y = y / ny
    x = np.cross(y, z)
    if lateral_hint is not None:
        hint = np.asarray(lateral_hint, dtype=np.float64).reshape(3)
        if np.linalg.norm(hint) > 0 and np.dot(x, hint) < 0:
            x, y = -x, -y
    # rows of R map world vectors into canonical coordinates
    rot = Rot3(np.vstack([x, y, z]))
    obj = np.asarray(object_pos_t0, dtype=np.float64).reshape(3)
    trans = -rot.apply(obj)
    return CanonicalTransform(Pose(rot, trans), t0)


def apply_canonical(transform: CanonicalTransform, poses: Sequence[Pose]) -> list[Pose]:
    """Left-multiply every pose by the world-to-canonical transform."""
    T = transform.t_w_to_A
    return [T @ p for p in poses]


def default_approach(
    wrist_positions: np.ndarray, object_centroids: np.ndarray
) -> np.ndarray:
    """Mean unit wrist-to-object vector over the closest quartile of frames."""
    w = np.asarray(wrist_positions, dtype=np.float64).reshape(-1, 3)
    o = np.asarray(object_centroids, dtype=np.float64).reshape(-1, 3)
    if w.shape != o.shape or w.shape[0] == 0:
        raise ValueError("wrist/object streams must be equal-length and non-empty")
    d = np.linalg.norm(o - w, axis=1)
    cutoff = np.percentile(d, APPROACH_PERCENTILE)
    sel = d <= max(cutoff, 1e-9)
    vecs = o[sel] - w[sel]
    norms = np.linalg.norm(vecs, axis=1)
    keep = norms > 1e-9
    if not np.any(keep):
        raise DegenerateGeometryError("hand coincides with object in all close frames")
    mean = (vecs[keep] / norms[keep, None]).mean(axis=0)
    n = np.linalg.norm(mean)
    if n <= 1e-9:
        raise DegenerateGeometryError("approach directions cancel out")
    return mean / n


def default_t0(
    wrist_positions: np.ndarray,
    object_centroids: np.ndarray,
    salient_distance: float = SALIENT_DISTANCE_M,
) -> int:
    """First frame with hand-object centroid distance below the threshold.

    Falls back to the closest frame when the threshold is never reached.
    """
    w = np.asarray(wrist_positions, dtype=np.float64).reshape(-1, 3)
    o = np.asarray(object_centroids, dtype=np.float64).reshape(-1, 3)
    d = np.linalg.norm(o - w, axis=1)
    hits = np.nonzero(d < salient_distance)[0]
    if hits.size:
        return int(hits[0])
    log.warning("no frame within %.3f m; using closest frame as t0", salient_distance)
    return int(np.argmin(d))

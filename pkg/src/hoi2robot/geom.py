"""Rigid-body math shared by the whole pipeline.

Rotations are stored as 3x3 matrices; quaternions (wxyz) are accepted only
at the I/O boundary and converted on ingest.  Angles are radians everywhere
except report surfaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-6
_QUAT_NORM_REJECT = 1e-3


class DegenerateGeometryError(ValueError):
    """Raised when an input configuration has no well-defined answer."""


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite 3-vector: {a}")
    return a


@dataclass(frozen=True)
class Rot3:
    """Proper rotation matrix (orthonormal columns, det +1)."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64).reshape(3, 3)
        err = np.abs(m.T @ m - np.eye(3)).max()
        if err > _ORTHO_TOL or abs(np.linalg.det(m) - 1.0) > _ORTHO_TOL:
            raise ValueError(f"not a rotation matrix (orthonormality error {err:.2e})")
        object.__setattr__(self, "m", m)
        self.m.setflags(write=False)

    @staticmethod
    def identity() -> "Rot3":
        return Rot3(np.eye(3))

    @staticmethod
    def from_axis_angle(w) -> "Rot3":
        return Rot3(so3_exp(_as_vec3(w)))

    @staticmethod
    def from_quat_wxyz(q) -> "Rot3":
        q = np.asarray(q, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > _QUAT_NORM_REJECT:
            raise ValueError(f"quaternion norm {n:.4f} deviates by more than {_QUAT_NORM_REJECT}")
        w, x, y, z = q / n
        return Rot3(
            np.array(
                [
                    [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                    [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                    [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
                ]
            )
        )

    @staticmethod
    def from_columns(x, y, z) -> "Rot3":
        return Rot3(np.column_stack([_as_vec3(x), _as_vec3(y), _as_vec3(z)]))

    def to_quat_wxyz(self) -> np.ndarray:
        m = self.m
        t = np.trace(m)
        if t > 0:
            s = math.sqrt(t + 1.0) * 2
            q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
        else:
            i = int(np.argmax(np.diag(m)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = math.sqrt(max(1.0 + m[i, i] - m[j, j] - m[k, k], 0.0)) * 2
            q = np.empty(4)
            q[0] = (m[k, j] - m[j, k]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (m[j, i] + m[i, j]) / s
            q[1 + k] = (m[k, i] + m[i, k]) / s
        if q[0] < 0:
            q = -q
        return q / np.linalg.norm(q)

    def inverse(self) -> "Rot3":
        return Rot3(self.m.T)

    def compose(self, other: "Rot3") -> "Rot3":
        return Rot3(self.m @ other.m)

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.m.T

    def log(self) -> np.ndarray:
        return so3_log_matrix(self.m)

    def angle_to(self, other: "Rot3") -> float:
        return float(np.linalg.norm(so3_log_matrix(self.m.T @ other.m)))


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula, axis-angle vector -> rotation matrix."""
    w = _as_vec3(w)
    th = np.linalg.norm(w)
    K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if th < 1e-10:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(th) / th
    b = (1.0 - math.cos(th)) / (th * th)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log_matrix(m: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, |result| in [0, pi].

    Near pi the skew part vanishes, so the axis is recovered from the
    symmetric part instead.
    """
    m = np.asarray(m, dtype=np.float64)
    c = (np.trace(m) - 1.0) * 0.5
    c = min(1.0, max(-1.0, c))
    th = math.acos(c)
    skew = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    if th < 1e-8:
        return 0.5 * skew
    if th > math.pi - 1e-6:
        # axis from the largest diagonal entry of (M + I) / 2
        A = (m + np.eye(3)) * 0.5
        i = int(np.argmax(np.diag(A)))
        axis = A[:, i] / math.sqrt(max(A[i, i], 1e-300))
        axis /= np.linalg.norm(axis)
        # fix sign from the skew part when it is not fully degenerate
        if np.dot(axis, skew) < 0:
            axis = -axis
        return th * axis
    return th / (2.0 * math.sin(th)) * skew


def so3_log(r: Rot3) -> np.ndarray:
    return so3_log_matrix(r.m)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: x_out = rot * x + trans."""

    rot: Rot3 = field(default_factory=Rot3.identity)
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "trans", _as_vec3(self.trans))
        self.trans.setflags(write=False)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_rt(rot_m, trans) -> "Pose":
        return Pose(Rot3(rot_m), trans)

    @staticmethod
    def from_matrix(T) -> "Pose":
        T = np.asarray(T, dtype=np.float64).reshape(4, 4)
        return Pose(Rot3(T[:3, :3]), T[:3, 3])

    def to_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rot.m
        T[:3, 3] = self.trans
        return T

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rot.compose(other.rot), self.rot.apply(other.trans) + self.trans)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rinv = self.rot.inverse()
        return Pose(rinv, -rinv.apply(self.trans))

    def apply(self, pts) -> np.ndarray:
        return self.rot.apply(pts) + self.trans


def pose_geodesic(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation error in meters, rotation error in radians)."""
    t_err = float(np.linalg.norm(a.trans - b.trans))
    r_err = a.rot.angle_to(b.rot)
    return t_err, r_err


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box, min <= max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo, hi = _as_vec3(self.min), _as_vec3(self.max)
        if np.any(lo > hi):
            raise ValueError(f"AABB min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)
        self.min.setflags(write=False)
        self.max.setflags(write=False)

    @staticmethod
    def from_points(pts) -> "Aabb":
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise ValueError("empty point set")
        return Aabb(pts.min(axis=0), pts.max(axis=0))

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))


def aabb_iou(a: Aabb, b: Aabb) -> float:
    """Intersection-over-union of box volumes; 0 for a zero-volume union."""
    lo = np.maximum(a.min, b.min)
    hi = np.minimum(a.max, b.max)
    inter = float(np.prod(np.maximum(hi - lo, 0.0)))
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return inter / union

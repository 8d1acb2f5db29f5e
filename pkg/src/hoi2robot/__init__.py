"""hoi2robot: hand-object interaction tracks -> checked robot trajectories."""

from .geom import Aabb, DegenerateGeometryError, Pose, Rot3, aabb_iou, pose_geodesic, so3_log

__all__ = [
    "Aabb",
    "DegenerateGeometryError",
    "Pose",
    "Rot3",
    "aabb_iou",
    "pose_geodesic",
    "so3_log",
]

__version__ = "0.1.0"

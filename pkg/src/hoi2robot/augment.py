"""Trajectory augmentation: contact segmentation, hold-segment transforms,
open-segment remapping, sagittal mirroring, and object substitution scoring.

All augmentations operate in the canonical action space and preserve the
hand-object relative geometry that makes the demonstrations replayable.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geom import Aabb, DegenerateGeometryError, Pose, Rot3, aabb_iou, so3_log_matrix
from .plausibility import TriMesh
from .retarget import CLOSED, OPEN, GripperTrajectory

log = logging.getLogger(__name__)

HOLD = "hold"

DEFAULT_TAU_SCREW_RAD = 0.35
DEFAULT_ROTATION_CAP_RAD = 0.3

# x = 0 sagittal plane
MIRROR_S = np.diag([-1.0, 1.0, 1.0])
_RY_PI = np.diag([-1.0, 1.0, -1.0])  # rotation about y by pi


@dataclass(frozen=True)
class Segment:
    start: int  # inclusive
    end: int  # exclusive
    state: str  # HOLD or OPEN

    def __post_init__(self):
        if self.start >= self.end:
            raise ValueError("empty segment")
        if self.state not in (HOLD, OPEN):
            raise ValueError(f"bad segment state {self.state!r}")

    def __len__(self) -> int:
        return self.end - self.start


def segment_trajectory(traj: GripperTrajectory) -> list[Segment]:
    """Maximal runs of constant gripper command; closed runs become hold."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    segments: list[Segment] = []
    start = 0
    for t in range(1, len(traj) + 1):
        if t == len(traj) or traj.commands[t] != traj.commands[start]:
            state = HOLD if traj.commands[start] == CLOSED else OPEN
            segments.append(Segment(start, t, state))
            start = t
    return segments


@dataclass(frozen=True)
class AugmentSpec:
    object_transform: Pose
    open_anchors: dict = field(default_factory=dict)  # seg index -> (p_hat_s, p_hat_e)
    rotation_cap: float = DEFAULT_ROTATION_CAP_RAD

    def __post_init__(self):
        ang = float(np.linalg.norm(self.object_transform.rot.log()))
        if ang > self.rotation_cap + 1e-12:
            raise ValueError(
                f"object transform rotation {ang:.3f} rad exceeds cap {self.rotation_cap}"
            )


def transform_hold(traj: GripperTrajectory, seg: Segment, t_o: Pose,
                   rotation_cap: float = DEFAULT_ROTATION_CAP_RAD) -> list[Pose]:
    """Left-multiply every hold-segment waypoint by the object-frame transform."""
    if seg.state != HOLD:
        raise ValueError("transform_hold requires a hold segment")
    ang = float(np.linalg.norm(t_o.rot.log()))
    if ang > rotation_cap + 1e-12:
        raise ValueError(f"rotation {ang:.3f} rad exceeds cap {rotation_cap}")
    return [t_o @ traj.poses[t] for t in range(seg.start, seg.end)]


def remap_open(
    traj: GripperTrajectory,
    seg: Segment,
    anchors: tuple[np.ndarray, np.ndarray],
    r_delta: Rot3,
    progress: str = "arclength",
) -> list[Pose]:
    """Remap an open segment onto new endpoint anchors, keeping the
    deviation-from-chord residual of the original path.

    Progress along the segment is cumulative arc length by default
    ("frame" uses the frame index instead).
    """
    if seg.state != OPEN:
        raise ValueError("remap_open requires an open segment")
    if len(seg) < 2:
        raise ValueError("open segment must span at least 2 frames")
    p = np.array([traj.poses[t].trans for t in range(seg.start, seg.end)])
    p_s, p_e = p[0], p[-1]
    p_hat_s = np.asarray(anchors[0], dtype=np.float64).reshape(3)
    p_hat_e = np.asarray(anchors[1], dtype=np.float64).reshape(3)
    if np.linalg.norm(p_e - p_s) <= 1e-12 and np.linalg.norm(p_hat_e - p_hat_s) > 1e-12:
        raise DegenerateGeometryError("degenerate chord: original endpoints coincide")

    if progress == "arclength":
        steps = np.linalg.norm(np.diff(p, axis=0), axis=1)
        total = steps.sum()
        if total <= 1e-12:
            alpha = np.linspace(0.0, 1.0, len(p))
        else:
            alpha = np.concatenate([[0.0], np.cumsum(steps)]) / total
    elif progress == "frame":
        alpha = np.linspace(0.0, 1.0, len(p))
    else:
        raise ValueError(f"unknown progress mode {progress!r}")

    chord = p_s[None, :] + alpha[:, None] * (p_e - p_s)[None, :]
    new_chord = p_hat_s[None, :] + alpha[:, None] * (p_hat_e - p_hat_s)[None, :]
    p_new = new_chord + (p - chord)
    # endpoint anchoring is exact by construction; snap away rounding residue
    p_new[0] = p_hat_s
    p_new[-1] = p_hat_e
    return [
        Pose(r_delta.compose(traj.poses[seg.start + i].rot), p_new[i])
        for i in range(len(p))
    ]


@dataclass(frozen=True)
class MirrorSpec:
    tau_screw: float = DEFAULT_TAU_SCREW_RAD

    def __post_init__(self):
        if self.tau_screw <= 0:
            raise ValueError("tau_screw must be positive")


@dataclass
class MirrorResult:
    hand: list[Pose]
    object: list[Pose]
    chirality_flipped: bool = True
    rejected: bool = False
    reject_reason: Optional[str] = None


def mirror_pose(p: Pose) -> Pose:
    """Sagittal reflection: position S p, orientation S R S Ry(pi)."""
    return Pose(Rot3(MIRROR_S @ p.rot.m @ MIRROR_S @ _RY_PI), MIRROR_S @ p.trans)


def screw_component(object_poses: Sequence[Pose], seg: Segment, axis) -> float:
    """Signed rotation accumulated about `axis` over the segment."""
    if len(seg) < 2:
        raise ValueError("segment must span at least 2 frames")
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    axis = axis / np.linalg.norm(axis)
    total = 0.0
    for t in range(seg.start, seg.end - 1):
        w = so3_log_matrix(object_poses[t].rot.m.T @ object_poses[t + 1].rot.m)
        total += float(np.dot(w, axis))
    return total


def mirror_trajectory(
    hand_traj: GripperTrajectory,
    object_poses: Sequence[Pose],
    spec: MirrorSpec,
    task_axis=(0.0, 0.0, 1.0),
) -> MirrorResult:
    """Mirror hand and object streams about the sagittal plane.

    Rejected (no output) when any hold segment accumulates more rotation
    about the task axis than tau_screw, since such motions encode handedness
    (threading semantics).
    """
    if len(hand_traj) != len(object_poses):
        raise ValueError("hand and object streams must be equal length")
    for seg in segment_trajectory(hand_traj):
        if seg.state == HOLD and len(seg) >= 2:
            screw = screw_component(object_poses, seg, task_axis)
            if abs(screw) > spec.tau_screw:
                return MirrorResult(
                    [], [], rejected=True,
                    reject_reason=f"screw component {screw:.3f} rad exceeds {spec.tau_screw}",
                )
    return MirrorResult(
        hand=[mirror_pose(p) for p in hand_traj.poses],
        object=[mirror_pose(p) for p in object_poses],
    )


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty point set")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


@dataclass(frozen=True)
class SimilarityWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    surface_samples: int = 2000

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0 or self.alpha + self.beta + self.gamma <= 0:
            raise ValueError("weights must be non-negative with positive sum")
        if self.surface_samples <= 0:
            raise ValueError("surface_samples must be positive")


@dataclass
class ObjectAsset:
    id: str
    mesh: TriMesh
    canonical_pose: Pose = field(default_factory=Pose.identity)
    category: str = ""
    scale: float = 1.0
    embedding: Optional[np.ndarray] = None

    def aabb(self) -> Aabb:
        return Aabb(self.mesh.aabb_min(), self.mesh.aabb_max())


def _unit_normalized(mesh: TriMesh) -> TriMesh:
    """Center at the AABB center and scale the longest extent to 1."""
    lo, hi = mesh.aabb_min(), mesh.aabb_max()
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise DegenerateGeometryError("zero-extent mesh")
    center = 0.5 * (lo + hi)
    return TriMesh((mesh.vertices - center) / extent, mesh.triangles)


def retrieval_score(source: ObjectAsset, candidate: ObjectAsset, w: SimilarityWeights) -> float:
    """Fused shape/semantics cost; lower means a better substitute.

    Chamfer on unit-normalized surface samples, plus an AABB aspect term
    (1 - IoU of the normalized boxes), plus a semantic term
    gamma * (1 - cosine similarity) when both embeddings are present.
    """
    src = _unit_normalized(source.mesh)
    cand = _unit_normalized(candidate.mesh)
    # identical meshes must sample identically so the term vanishes exactly
    cd = chamfer_distance(
        src.sample_surface(w.surface_samples, np.random.default_rng(0)),
        cand.sample_surface(w.surface_samples, np.random.default_rng(0)),
    )
    iou = aabb_iou(Aabb(src.aabb_min(), src.aabb_max()), Aabb(cand.aabb_min(), cand.aabb_max()))
    score = w.alpha * cd + w.beta * (1.0 - iou)
    if source.embedding is not None and candidate.embedding is not None:
        e1 = np.asarray(source.embedding, dtype=np.float64).ravel()
        e2 = np.asarray(candidate.embedding, dtype=np.float64).ravel()
        n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
        if n1 > 0 and n2 > 0:
            score += w.gamma * (1.0 - float(np.dot(e1, e2) / (n1 * n2)))
    elif w.gamma > 0:
        log.warning("missing embedding on %s or %s; dropping semantic term",
                    source.id, candidate.id)
    return float(score)


def rank_substitutes(
    source: ObjectAsset, library: Sequence[ObjectAsset], w: SimilarityWeights, k: int
) -> list[ObjectAsset]:
    """Top-k library assets ascending by score, ties broken by id."""
    if not library:
        raise ValueError("empty asset library")
    scored = sorted(
        ((retrieval_score(source, cand, w), cand.id, cand) for cand in library),
        key=lambda x: (x[0], x[1]),
    )
    return [cand for _, _, cand in scored[:k]]


@dataclass
class BoundSubstitute:
    asset: ObjectAsset
    scale: float
    alignment: Rot3  # substitute frame -> source frame
    pca_fallback: bool = False


def _surface_covariance(mesh: TriMesh) -> np.ndarray:
    """Exact covariance of a uniform density on the mesh surface."""
    v = mesh.vertices
    tri = v[mesh.triangles]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise DegenerateGeometryError("degenerate mesh: zero surface area")
    m = (a + b + c) / 3.0
    mu = np.einsum("f,fk->k", areas, m) / total
    second = (
        9.0 * np.einsum("f,fi,fj->ij", areas, m, m)
        + np.einsum("f,fi,fj->ij", areas, a, a)
        + np.einsum("f,fi,fj->ij", areas, b, b)
        + np.einsum("f,fi,fj->ij", areas, c, c)
    ) / 12.0
    return second / total - np.outer(mu, mu)


def _principal_axes(mesh: TriMesh):
    cov = _surface_covariance(mesh)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    # sign-fix each axis toward the positive octant
    for i in range(3):
        target = np.zeros(3)
        target[i] = 1.0
        if np.dot(evecs[:, i], target) < 0:
            evecs[:, i] = -evecs[:, i]
    if np.linalg.det(evecs) < 0:
        evecs[:, 2] = -evecs[:, 2]
    return evals, evecs


def bind_substitute(source: ObjectAsset, substitute: ObjectAsset) -> BoundSubstitute:
    """Scale and axis-align a substitute so the source pose stream replays.

    The substitute is scaled to match the source's maximum AABB extent and
    rotated so its principal axes align with the source's; with degenerate
    PCA (near-equal eigenvalues) the AABB axes are used instead.
    """
    src_ext = float(np.max(source.mesh.aabb_max() - source.mesh.aabb_min()))
    sub_ext = float(np.max(substitute.mesh.aabb_max() - substitute.mesh.aabb_min()))
    if src_ext <= 0 or sub_ext <= 0:
        raise DegenerateGeometryError("zero-extent mesh")
    scale = src_ext / sub_ext

    fallback = False
    try:
        ev_s, ax_s = _principal_axes(source.mesh)
        ev_c, ax_c = _principal_axes(substitute.mesh)
        for ev in (ev_s, ev_c):
            span = max(float(ev[0]), 1e-300)
            if (ev[0] - ev[1]) / span < 1e-6 or abs(ev[1] - ev[2]) / span < 1e-6:
                raise DegenerateGeometryError("degenerate PCA")
        alignment = Rot3(ax_s @ ax_c.T)
    except DegenerateGeometryError:
        log.warning("PCA degenerate for %s; falling back to AABB axes", substitute.id)
        alignment = Rot3.identity()
        fallback = True

    bound_mesh = TriMesh(substitute.mesh.vertices * scale, substitute.mesh.triangles)
    asset = ObjectAsset(
        id=substitute.id,
        mesh=bound_mesh,
        canonical_pose=source.canonical_pose,
        category=substitute.category,
        scale=substitute.scale * scale,
        embedding=substitute.embedding,
    )
    return BoundSubstitute(asset=asset, scale=scale, alignment=alignment, pca_fallback=fallback)


def augment_trajectory(
    traj: GripperTrajectory,
    t_o: Pose,
    rotation_cap: float = DEFAULT_ROTATION_CAP_RAD,
) -> GripperTrajectory:
    """Apply an object-frame transform to hold segments and remap the
    adjacent open segments so the trajectory stays continuous.

    Open-segment anchors adjacent to a transformed hold segment are fixed by
    that segment; anchors at the clip boundary keep their original position.
    The hold rotation is applied to open-segment orientations as well.
    """
    segments = segment_trajectory(traj)
    r_delta = t_o.rot
    new_poses: list[Pose] = list(traj.poses)
    for i, seg in enumerate(segments):
        if seg.state == HOLD:
            new_poses[seg.start : seg.end] = transform_hold(traj, seg, t_o, rotation_cap)
    for i, seg in enumerate(segments):
        if seg.state != OPEN:
            continue
        if len(seg) < 2:
            # single-frame open segment: shift with its hold neighbor if any
            if i > 0 and segments[i - 1].state == HOLD:
                new_poses[seg.start] = t_o @ traj.poses[seg.start]
            continue
        start_anchor = traj.poses[seg.start].trans
        end_anchor = traj.poses[seg.end - 1].trans
        touched = False
        if i > 0 and segments[i - 1].state == HOLD:
            start_anchor = (t_o @ traj.poses[seg.start]).trans
            touched = True
        if i + 1 < len(segments) and segments[i + 1].state == HOLD:
            end_anchor = (t_o @ traj.poses[seg.end - 1]).trans
            touched = True
        slice_r_delta = r_delta if touched else Rot3.identity()
        new_poses[seg.start : seg.end] = remap_open(
            traj, seg, (start_anchor, end_anchor), slice_r_delta
        )
    return GripperTrajectory(
        poses=new_poses,
        commands=list(traj.commands),
        widths=list(traj.widths) if traj.widths else None,
        gesture=traj.gesture,
    )


def sample_open_anchor(rng: np.random.Generator, box_min, box_max) -> np.ndarray:
    """Uniform draw of a replacement endpoint inside a reachable box."""
    lo = np.asarray(box_min, dtype=np.float64).reshape(3)
    hi = np.asarray(box_max, dtype=np.float64).reshape(3)
    return lo + rng.random(3) * (hi - lo)

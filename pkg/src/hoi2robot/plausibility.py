"""Truncated signed distance fields and hand-object penetration handling.

The object field is built once from a watertight mesh in the object frame
(positive outside, clamped to +-tau) and queried with trilinear
interpolation.  Penetration is scored as the sum of squared negative
distances over selected hand-surface points, and resolved by finite-
difference gradient descent on the wrist pose.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geom import Pose, Rot3, so3_exp

log = logging.getLogger(__name__)

DEFAULT_VOXEL_M = 0.005
DEFAULT_TRUNC_FACTOR = 4.0
MAX_ROT_STEP_RAD = 0.1


class NotWatertightError(ValueError):
    """Sign of the distance field is undefined for an open mesh."""


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (V, 3) meters
    triangles: np.ndarray  # (F, 3) int indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        v.setflags(write=False)
        f.setflags(write=False)

    def aabb_min(self) -> np.ndarray:
        return self.vertices.min(axis=0)

    def aabb_max(self) -> np.ndarray:
        return self.vertices.max(axis=0)

    def is_watertight(self) -> bool:
        """Every edge shared by exactly two triangles with opposite direction."""
        if len(self.triangles) == 0:
            return False
        edges: dict[tuple[int, int], int] = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                edges[(int(a), int(b))] = edges.get((int(a), int(b)), 0) + 1
        for (a, b), n in edges.items():
            if n != 1 or edges.get((b, a), 0) != 1:
                return False
        return True

    def scaled(self, s: float) -> "TriMesh":
        return TriMesh(self.vertices * s, self.triangles)

    def transformed(self, pose: Pose) -> "TriMesh":
        return TriMesh(pose.apply(self.vertices), self.triangles)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform surface samples."""
        v = self.vertices
        f = self.triangles
        a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        total = areas.sum()
        if total <= 0:
            raise ValueError("degenerate mesh: zero surface area")
        idx = rng.choice(len(f), size=n, p=areas / total)
        u = rng.random(n)
        w = rng.random(n)
        flip = u + w > 1
        u[flip], w[flip] = 1 - u[flip], 1 - w[flip]
        return a[idx] + u[:, None] * (b[idx] - a[idx]) + w[:, None] * (c[idx] - a[idx])


def point_triangle_distances(points: np.ndarray, mesh: TriMesh, chunk: int = 2048) -> np.ndarray:
    """Unsigned distance from each point to the closest mesh triangle."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    v = mesh.vertices
    f = mesh.triangles
    a = v[f[:, 0]]
    ab = v[f[:, 1]] - a
    ac = v[f[:, 2]] - a
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk]
        out[s : s + chunk] = _pt_tri_chunk(p, a, ab, ac)
    return out


def _pt_tri_chunk(p: np.ndarray, a: np.ndarray, ab: np.ndarray, ac: np.ndarray) -> np.ndarray:
    # Ericson closest-point-on-triangle by Voronoi region, vectorized (P, F)
    b = a + ab
    c = a + ac
    ap = p[:, None, :] - a[None, :, :]
    bp = p[:, None, :] - b[None, :, :]
    cp_ = p[:, None, :] - c[None, :, :]
    d1 = np.einsum("fk,pfk->pf", ab, ap)
    d2 = np.einsum("fk,pfk->pf", ac, ap)
    d3 = np.einsum("fk,pfk->pf", ab, bp)
    d4 = np.einsum("fk,pfk->pf", ac, bp)
    d5 = np.einsum("fk,pfk->pf", ab, cp_)
    d6 = np.einsum("fk,pfk->pf", ac, cp_)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def safe(x):
        return np.where(np.abs(x) < 1e-300, 1e-300, x)

    # barycentric (u along ab, w along ac) chosen by region, innermost first
    denom = safe(va + vb + vc)
    u = vb / denom
    w = vc / denom
    # edge BC
    t_bc = (d4 - d3) / safe((d4 - d3) + (d5 - d6))
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    u = np.where(on_bc, 1.0 - t_bc, u)
    w = np.where(on_bc, t_bc, w)
    # edge AC
    t_ac = d2 / safe(d2 - d6)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    u = np.where(on_ac, 0.0, u)
    w = np.where(on_ac, t_ac, w)
    # edge AB
    t_ab = d1 / safe(d1 - d3)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    u = np.where(on_ab, t_ab, u)
    w = np.where(on_ab, 0.0, w)
    # vertices
    at_c = (d6 >= 0) & (d5 <= d6)
    u = np.where(at_c, 0.0, u)
    w = np.where(at_c, 1.0, w)
    at_b = (d3 >= 0) & (d4 <= d3)
    u = np.where(at_b, 1.0, u)
    w = np.where(at_b, 0.0, w)
    at_a = (d1 <= 0) & (d2 <= 0)
    u = np.where(at_a, 0.0, u)
    w = np.where(at_a, 0.0, w)

    diff = ap - u[..., None] * ab[None, :, :] - w[..., None] * ac[None, :, :]
    d = np.sqrt(np.einsum("pfk,pfk->pf", diff, diff))
    return d.min(axis=1)


def winding_numbers(points: np.ndarray, mesh: TriMesh, chunk: int = 2048) -> np.ndarray:
    """Generalized winding number per point (about 1 inside, 0 outside)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    v = mesh.vertices
    f = mesh.triangles
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk]
        a = v[f[:, 0]][None, :, :] - p[:, None, :]
        b = v[f[:, 1]][None, :, :] - p[:, None, :]
        c = v[f[:, 2]][None, :, :] - p[:, None, :]
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        num = np.einsum("pfk,pfk->pf", a, np.cross(b, c))
        den = (
            la * lb * lc
            + np.einsum("pfk,pfk->pf", a, b) * lc
            + np.einsum("pfk,pfk->pf", b, c) * la
            + np.einsum("pfk,pfk->pf", c, a) * lb
        )
        out[s : s + chunk] = np.sum(2.0 * np.arctan2(num, den), axis=1) / (4.0 * math.pi)
    return out


@dataclass(frozen=True)
class TSDFGrid:
    """Voxelized truncated signed distance field, positive outside."""

    origin: np.ndarray  # (3,) meters, center of voxel (0,0,0)
    voxel: float
    dims: tuple[int, int, int]
    trunc: float
    values: np.ndarray  # dims-shaped, clamped to [-trunc, +trunc]

    def __post_init__(self):
        if self.voxel <= 0:
            raise ValueError("voxel size must be positive")
        if self.trunc < self.voxel:
            raise ValueError("truncation must be >= voxel size")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != tuple(self.dims):
            raise ValueError(f"values shape {vals.shape} != dims {self.dims}")
        object.__setattr__(self, "values", vals)
        vals.setflags(write=False)


def build_tsdf(
    mesh: TriMesh,
    voxel: float = DEFAULT_VOXEL_M,
    trunc: Optional[float] = None,
    padding: Optional[float] = None,
) -> TSDFGrid:
    """Voxelize a watertight mesh into a TSDF covering its AABB plus padding."""
    if not mesh.is_watertight():
        raise NotWatertightError("sign undefined: mesh is not watertight")
    if trunc is None:
        trunc = DEFAULT_TRUNC_FACTOR * voxel
    if padding is None:
        padding = trunc
    lo = mesh.aabb_min() - padding
    hi = mesh.aabb_max() + padding
    dims = tuple(int(math.ceil(e / voxel)) + 1 for e in hi - lo)
    xs = [lo[k] + voxel * np.arange(dims[k]) for k in range(3)]
    gx, gy, gz = np.meshgrid(*xs, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])

    # exact signed distances only in a band around the surface; far voxels
    # clamp to +-trunc with the sign decided per connected component
    from scipy.ndimage import label as cc_label
    from scipy.spatial import cKDTree

    tri_pts = mesh.vertices[mesh.triangles]  # (F, 3, 3)
    centroids = tri_pts.mean(axis=1)
    anchors = np.vstack([mesh.vertices, centroids])
    # farthest any surface point can be from its triangle's nearest anchor
    h = float(np.linalg.norm(tri_pts - centroids[:, None, :], axis=2).max())
    d_anchor, _ = cKDTree(anchors).query(pts)
    near = d_anchor <= trunc + h + voxel

    sdf = np.empty(len(pts))
    if np.any(near):
        dist = point_triangle_distances(pts[near], mesh)
        inside = winding_numbers(pts[near], mesh) > 0.5
        sdf[near] = np.where(inside, -dist, dist)

    far = (~near).reshape(dims)
    if np.any(far):
        labels, n_comp = cc_label(far)
        flat = labels.ravel()
        for comp in range(1, n_comp + 1):
            rep = int(np.argmax(flat == comp))
            sign = -1.0 if winding_numbers(pts[rep : rep + 1], mesh)[0] > 0.5 else 1.0
            sdf[flat == comp] = sign * trunc

    values = np.clip(sdf, -trunc, trunc).reshape(dims)
    return TSDFGrid(origin=lo, voxel=voxel, dims=dims, trunc=trunc, values=values)


def query_sdf(grid: TSDFGrid, points) -> np.ndarray:
    """Trilinear TSDF lookup; points outside the grid return +trunc."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    g = (pts - grid.origin) / grid.voxel
    dims = np.array(grid.dims)
    out = np.full(len(pts), grid.trunc)
    ok = np.all((g >= 0) & (g <= dims - 1), axis=1)
    if np.any(ok):
        gg = g[ok]
        i0 = np.minimum(np.floor(gg).astype(np.int64), dims - 2)
        frac = gg - i0
        v = grid.values
        acc = np.zeros(len(gg))
        for dx in (0, 1):
            wx = frac[:, 0] if dx else 1 - frac[:, 0]
            for dy in (0, 1):
                wy = frac[:, 1] if dy else 1 - frac[:, 1]
                for dz in (0, 1):
                    wz = frac[:, 2] if dz else 1 - frac[:, 2]
                    acc += wx * wy * wz * v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        out[ok] = acc
    return out if np.ndim(points) > 1 else out


@dataclass(frozen=True)
class HandSurface:
    """Hand surface sample points with a palm subset, in the wrist frame."""

    points: np.ndarray  # (N, 3)
    palm_subset: np.ndarray  # int indices into points

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        idx = np.asarray(self.palm_subset, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= len(pts)):
            raise ValueError("palm subset index out of range")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "palm_subset", idx)

    def select(self, subset: str) -> np.ndarray:
        if subset == "palm":
            return self.points[self.palm_subset]
        if subset == "all":
            return self.points
        raise ValueError(f"unknown subset {subset!r}")


def point_penetration_energy(points: np.ndarray, grid: TSDFGrid) -> float:
    """Sum of squared negative signed distances over the given points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return 0.0
    phi = query_sdf(grid, pts)
    neg = phi[phi < 0]
    return float(np.sum(neg * neg))


def penetration_energy(surface: HandSurface, subset: str, grid: TSDFGrid) -> float:
    """Squared-penetration energy over the selected hand-surface subset."""
    return point_penetration_energy(surface.select(subset), grid)


@dataclass
class ResolveOptions:
    max_iterations: int = 200
    step_size: float = 1.0
    tolerance: float = 1e-10
    translation_only: bool = False
    fd_eps: Optional[float] = None  # defaults to voxel / 4


@dataclass
class ResolveResult:
    pose: Pose
    energy: float
    iterations: int
    converged: bool
    displacement: float  # |final - initial| translation, meters
    energy_history: list = field(default_factory=list)  # accepted-step energies


def resolve_penetration(
    initial: Pose,
    surface_local: HandSurface,
    grid: TSDFGrid,
    opts: Optional[ResolveOptions] = None,
    subset: str = "palm",
) -> ResolveResult:
    """Push the wrist pose out of the object by gradient descent.

    Finite-difference gradients of the penetration energy with respect to
    translation and a local axis-angle rotation; steps are accepted only if
    they reduce the energy, with backtracking otherwise.  Rotation steps are
    capped because grid gradients are only locally valid.
    """
    opts = opts or ResolveOptions()
    pts_local = surface_local.select(subset)
    pose = initial
    if len(pts_local) == 0:
        return ResolveResult(pose, 0.0, 0, True, 0.0)
    eps = opts.fd_eps if opts.fd_eps is not None else grid.voxel / 4.0

    def energy_of(p: Pose) -> float:
        return point_penetration_energy(p.apply(pts_local), grid)

    e = energy_of(pose)
    best_pose, best_e = pose, e
    history = [e]
    it = 0
    step = opts.step_size
    while it < opts.max_iterations and e > opts.tolerance:
        it += 1
        n_dof = 3 if opts.translation_only else 6
        grad = np.zeros(n_dof)
        for d in range(n_dof):
            dv = np.zeros(n_dof)
            dv[d] = eps
            grad[d] = (energy_of(_perturb(pose, dv)) - energy_of(_perturb(pose, -dv))) / (2 * eps)
        gnorm = np.linalg.norm(grad)
        if gnorm <= 1e-300:
            break
        improved = False
        trial_step = step
        for _ in range(20):
            dv = -trial_step * grad / gnorm * eps * 4.0
            if n_dof == 6:
                rot_mag = np.linalg.norm(dv[3:])
                if rot_mag > MAX_ROT_STEP_RAD:
                    dv[3:] *= MAX_ROT_STEP_RAD / rot_mag
            cand = _perturb(pose, dv)
            ce = energy_of(cand)
            if ce < e:
                pose, e = cand, ce
                history.append(e)
                improved = True
                break
            trial_step *= 0.5
        if not improved:
            break
        if e < best_e:
            best_pose, best_e = pose, e

    converged = best_e <= max(opts.tolerance, 1e-10)
    if not converged:
        log.warning("penetration resolve did not converge: energy %.3e after %d iters", best_e, it)
    disp = float(np.linalg.norm(best_pose.trans - initial.trans))
    return ResolveResult(best_pose, best_e, it, converged, disp, history)


def _perturb(pose: Pose, dv: np.ndarray) -> Pose:
    trans = pose.trans + dv[:3]
    if len(dv) == 6:
        rot = Rot3(so3_exp(dv[3:])).compose(pose.rot)
    else:
        rot = pose.rot
    return Pose(rot, trans)


@dataclass(frozen=True)
class RewardSpec:
    """Weights and kernel scales for the tracking/contact reward."""

    lambda_geo: float = 1.0
    lambda_dyn: float = 1.0
    lambda_con: float = 1.0
    sigma_geo: float = 0.05
    sigma_dyn: float = 0.1
    sigma_con: float = 1.0

    def __post_init__(self):
        if self.lambda_geo < 0 or self.lambda_dyn < 0 or self.lambda_con < 0:
            raise ValueError("weights must be non-negative")
        if self.lambda_geo + self.lambda_dyn + self.lambda_con <= 0:
            raise ValueError("at least one weight must be positive")
        if min(self.sigma_geo, self.sigma_dyn, self.sigma_con) <= 0:
            raise ValueError("kernel scales must be positive")


@dataclass(frozen=True)
class RewardState:
    """Hand/object pose vectors, their velocities, and contact force."""

    h: np.ndarray
    p: np.ndarray
    h_dot: np.ndarray
    p_dot: np.ndarray
    contact_force: float = 0.0

    def __post_init__(self):
        for name in ("h", "p", "h_dot", "p_dot"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())
        if self.contact_force < 0:
            raise ValueError("contact force must be non-negative")


def reward_step(state: RewardState, target: RewardState, spec: RewardSpec) -> float:
    """Tracking + contact reward for one step.

    Tracking terms decay as exp(-x / sigma); the contact term saturates as
    1 - exp(-c / sigma), so the total lies in [0, sum of weights].
    """
    for name in ("h", "p", "h_dot", "p_dot"):
        if getattr(state, name).shape != getattr(target, name).shape:
            raise ValueError(f"state/target shape mismatch on {name}")
    d_geo = np.linalg.norm(state.h - target.h) + np.linalg.norm(state.p - target.p)
    d_dyn = np.linalg.norm(state.h_dot - target.h_dot) + np.linalg.norm(state.p_dot - target.p_dot)
    c = state.contact_force
    return float(
        spec.lambda_geo * math.exp(-d_geo / spec.sigma_geo)
        + spec.lambda_dyn * math.exp(-d_dyn / spec.sigma_dyn)
        + spec.lambda_con * (1.0 - math.exp(-c / spec.sigma_con))
    )

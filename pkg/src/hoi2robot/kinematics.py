"""Serial-chain parsing, forward kinematics, and seeded damped-least-squares IK.

Chains come from a URDF-subset XML dialect (revolute / prismatic / fixed
joints on a single root-to-end-effector path; fixed joints are folded into
their neighbors).  Replay solves one IK problem per frame, seeding each
solve with the previous solution for temporal consistency.
"""

from __future__ import annotations

import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geom import Pose, Rot3, so3_exp

log = logging.getLogger(__name__)

REVOLUTE = "revolute"
PRISMATIC = "prismatic"
FIXED = "fixed"


class ChainParseError(ValueError):
    pass


class IkError(RuntimeError):
    """Non-convergence; carries the best configuration found and its residual."""

    def __init__(self, msg: str, best_q: np.ndarray, pos_err: float, rot_err: float):
        super().__init__(msg)
        self.best_q = best_q
        self.pos_err = pos_err
        self.rot_err = rot_err


@dataclass(frozen=True)
class Joint:
    name: str
    jtype: str  # REVOLUTE or PRISMATIC (fixed joints are folded away)
    origin: Pose  # parent link frame -> joint frame
    axis: np.ndarray  # unit, in joint frame
    lower: float
    upper: float

    def __post_init__(self):
        ax = np.asarray(self.axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(ax)
        if n <= 0:
            raise ValueError(f"joint {self.name}: zero axis")
        object.__setattr__(self, "axis", ax / n)
        if self.lower > self.upper:
            raise ValueError(f"joint {self.name}: lower > upper")

    def transform(self, q: float) -> Pose:
        if self.jtype == REVOLUTE:
            return self.origin @ Pose(Rot3(so3_exp(self.axis * q)), np.zeros(3))
        return self.origin @ Pose(Rot3.identity(), self.axis * q)


@dataclass(frozen=True)
class KinematicChain:
    joints: tuple[Joint, ...]
    ee_offset: Pose = field(default_factory=Pose.identity)

    @property
    def n(self) -> int:
        return len(self.joints)

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.lower for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.upper for j in self.joints])

    def clamp(self, q) -> np.ndarray:
        return np.clip(np.asarray(q, dtype=np.float64), self.lower, self.upper)

    def check_limits(self, q) -> None:
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.n,):
            raise ValueError(f"config length {q.shape} != {self.n} movable joints")
        tol = 1e-9
        if np.any(q < self.lower - tol) or np.any(q > self.upper + tol):
            raise ValueError(f"config {q} violates joint limits")


def parse_chain(document: str, root_link: str, ee_link: str) -> KinematicChain:
    """Parse the XML chain dialect into a serial root-to-EE chain.

    Fixed joints are folded into the next movable joint's origin (or the EE
    offset); any branching off the root-to-EE path is an error.
    """
    try:
        robot = ET.fromstring(document)
    except ET.ParseError as e:
        raise ChainParseError(f"malformed XML at line {e.position[0]}: {e}") from None
    if robot.tag != "robot":
        raise ChainParseError(f"expected <robot> root element, got <{robot.tag}>")

    links = {el.get("name") for el in robot.findall("link")}
    for name in (root_link, ee_link):
        if name not in links:
            raise ChainParseError(f"link {name!r} not declared")

    known = {"link", "joint"}
    for el in robot:
        if el.tag not in known:
            log.warning("ignoring unknown element <%s>", el.tag)

    by_parent: dict[str, list[ET.Element]] = {}
    for jel in robot.findall("joint"):
        parent = jel.find("parent")
        child = jel.find("child")
        if parent is None or child is None:
            raise ChainParseError(f"joint {jel.get('name')!r} missing parent/child")
        by_parent.setdefault(parent.get("link"), []).append(jel)

    # walk from root to EE; the path must never branch
    path: list[ET.Element] = []
    cur = root_link
    visited = {cur}
    while cur != ee_link:
        nxt = by_parent.get(cur, [])
        if len(nxt) == 0:
            raise ChainParseError(f"no joint leaves link {cur!r}; cannot reach {ee_link!r}")
        if len(nxt) > 1:
            raise ChainParseError(
                f"branching at link {cur!r}: joints {[j.get('name') for j in nxt]}"
            )
        jel = nxt[0]
        child = jel.find("child").get("link")
        if child in visited:
            raise ChainParseError(f"cycle at link {child!r}")
        visited.add(child)
        path.append(jel)
        cur = child

    joints: list[Joint] = []
    pending = Pose.identity()  # accumulated fixed transform
    for jel in path:
        name = jel.get("name") or f"joint{len(joints)}"
        jtype = jel.get("type")
        if jtype not in (REVOLUTE, PRISMATIC, FIXED):
            raise ChainParseError(f"joint {name!r}: unsupported type {jtype!r}")
        origin = _parse_origin(jel.find("origin"))
        if jtype == FIXED:
            pending = pending @ origin
            continue
        axis_el = jel.find("axis")
        axis = _parse_xyz(axis_el.get("xyz")) if axis_el is not None else np.array([0.0, 0.0, 1.0])
        limit = jel.find("limit")
        if limit is None or limit.get("lower") is None or limit.get("upper") is None:
            raise ChainParseError(f"movable joint {name!r} missing limit lower/upper")
        joints.append(
            Joint(
                name=name,
                jtype=jtype,
                origin=pending @ origin,
                axis=axis,
                lower=float(limit.get("lower")),
                upper=float(limit.get("upper")),
            )
        )
        pending = Pose.identity()
    return KinematicChain(joints=tuple(joints), ee_offset=pending)


def _parse_xyz(text: Optional[str]) -> np.ndarray:
    if not text:
        return np.zeros(3)
    vals = [float(x) for x in text.split()]
    if len(vals) != 3:
        raise ChainParseError(f"expected 3 values in {text!r}")
    return np.array(vals)


def _parse_origin(el: Optional[ET.Element]) -> Pose:
    if el is None:
        return Pose.identity()
    xyz = _parse_xyz(el.get("xyz"))
    rpy = _parse_xyz(el.get("rpy"))
    # URDF fixed-axis rpy: R = Rz(y) Ry(p) Rx(r)
    rot = (
        Rot3(so3_exp(np.array([0, 0, rpy[2]])))
        .compose(Rot3(so3_exp(np.array([0, rpy[1], 0]))))
        .compose(Rot3(so3_exp(np.array([rpy[0], 0, 0]))))
    )
    return Pose(rot, xyz)


def fk(chain: KinematicChain, q) -> Pose:
    """End-effector pose for a within-limits joint configuration."""
    chain.check_limits(q)
    q = np.asarray(q, dtype=np.float64)
    pose = Pose.identity()
    for joint, qi in zip(chain.joints, q):
        pose = pose @ joint.transform(float(qi))
    return pose @ chain.ee_offset


def fk_frames(chain: KinematicChain, q) -> list[Pose]:
    """Pose of each joint frame plus the EE, without limit checking."""
    q = np.asarray(q, dtype=np.float64)
    frames = []
    pose = Pose.identity()
    for joint, qi in zip(chain.joints, q):
        pose = pose @ joint.transform(float(qi))
        frames.append(pose)
    frames.append(pose @ chain.ee_offset)
    return frames


def jacobian(chain: KinematicChain, q) -> np.ndarray:
    """Geometric Jacobian (6 x n): linear rows then angular rows, world frame."""
    q = np.asarray(q, dtype=np.float64)
    frames = fk_frames(chain, q)
    p_ee = frames[-1].trans
    J = np.zeros((6, chain.n))
    for i, joint in enumerate(chain.joints):
        frame = frames[i]
        # axis in world, at the joint frame after its own motion (motion about
        # its own axis leaves the axis direction unchanged)
        z = frame.rot.apply(joint.axis)
        if joint.jtype == REVOLUTE:
            J[:3, i] = np.cross(z, p_ee - frame.trans)
            J[3:, i] = z
        else:
            J[:3, i] = z
    return J


@dataclass
class IkOptions:
    max_iterations: int = 200
    damping: float = 1e-3  # minimum damping; effective damping grows with the residual
    pos_tolerance: float = 1e-5
    rot_tolerance: float = 1e-4
    rot_weight: float = 0.5  # meters per radian
    step_cap: float = 0.5  # max joint-space step norm per iteration
    position_only: bool = False


def _pose_error(current: Pose, target: Pose) -> np.ndarray:
    """6-vector (dp; dtheta) moving current toward target, world frame."""
    dp = target.trans - current.trans
    dw = Rot3(target.rot.m @ current.rot.m.T).log()
    return np.concatenate([dp, dw])


def ik_solve(
    chain: KinematicChain,
    target: Pose,
    seed,
    opts: Optional[IkOptions] = None,
) -> np.ndarray:
    """Damped least-squares IK from a seed, clamped to joint limits.

    Raises IkError (carrying the best configuration and residual) when the
    tolerances are not met within the iteration budget.
    """
    opts = opts or IkOptions()
    chain.check_limits(seed)
    q = np.asarray(seed, dtype=np.float64).copy()
    best_q = q.copy()
    best_err = np.inf
    best_pos = best_rot = np.inf

    for _ in range(opts.max_iterations + 1):
        e = _pose_error(fk_frames(chain, q)[-1], target)
        pos_err = float(np.linalg.norm(e[:3]))
        rot_err = float(np.linalg.norm(e[3:]))
        if opts.position_only:
            rot_err = 0.0
        score = pos_err + opts.rot_weight * rot_err
        if score < best_err:
            best_err, best_q = score, q.copy()
            best_pos, best_rot = pos_err, rot_err
        if pos_err <= opts.pos_tolerance and rot_err <= opts.rot_tolerance:
            return q
        J = jacobian(chain, q)
        if opts.position_only:
            Jw = J[:3]
            ew = e[:3]
        else:
            w = np.concatenate([np.ones(3), np.full(3, opts.rot_weight)])
            Jw = J * w[:, None]
            ew = e * w
        JJt = Jw @ Jw.T
        # error-proportional damping: near-Newton convergence close to the
        # target, heavily damped (but step-capped) far from it
        lam2 = 0.5 * float(ew @ ew) + opts.damping * opts.damping
        dq = Jw.T @ np.linalg.solve(JJt + lam2 * np.eye(len(JJt)), ew)
        n = np.linalg.norm(dq)
        if n > opts.step_cap:
            dq *= opts.step_cap / n
        q = chain.clamp(q + dq)

    raise IkError(
        f"IK did not converge: pos {best_pos:.3e} m, rot {best_rot:.3e} rad",
        best_q,
        best_pos,
        best_rot,
    )


@dataclass
class ReplayOptions:
    ik: IkOptions = field(default_factory=IkOptions)
    rate_cap_revolute: float = 0.2  # rad per frame
    rate_cap_prismatic: float = 0.05  # m per frame


@dataclass
class ReplayReport:
    residual_pos: list[float]
    residual_rot: list[float]
    limit_saturated: list[bool]
    max_joint_step: float
    feasible: bool
    failed_frame: Optional[int] = None
    failure: Optional[str] = None


def replay_trajectory(
    chain: KinematicChain,
    targets: Sequence[Pose],
    q0,
    opts: Optional[ReplayOptions] = None,
) -> tuple[list[np.ndarray], ReplayReport]:
    """Solve IK per frame with the previous solution as the seed.

    A first-frame failure raises; a mid-trajectory failure truncates the
    output and marks the report infeasible.
    """
    opts = opts or ReplayOptions()
    chain.check_limits(q0)
    caps = np.array(
        [opts.rate_cap_revolute if j.jtype == REVOLUTE else opts.rate_cap_prismatic for j in chain.joints]
    )
    configs: list[np.ndarray] = []
    report = ReplayReport([], [], [], 0.0, True)
    seed = np.asarray(q0, dtype=np.float64)
    tol = 1e-9
    for t, target in enumerate(targets):
        try:
            q = ik_solve(chain, target, seed, opts.ik)
        except IkError as e:
            if t == 0:
                raise
            report.feasible = False
            report.failed_frame = t
            report.failure = str(e)
            log.warning("replay failed at frame %d: %s", t, e)
            break
        e6 = _pose_error(fk_frames(chain, q)[-1], target)
        report.residual_pos.append(float(np.linalg.norm(e6[:3])))
        report.residual_rot.append(float(np.linalg.norm(e6[3:])))
        report.limit_saturated.append(
            bool(np.any(q <= chain.lower + tol) or np.any(q >= chain.upper - tol))
        )
        if configs:
            step = np.abs(q - configs[-1])
            report.max_joint_step = max(report.max_joint_step, float(step.max()))
            if np.any(step > caps):
                report.feasible = False
                report.failed_frame = t
                report.failure = f"joint step {step.max():.3f} exceeds rate cap at frame {t}"
                configs.append(q)
                log.warning("%s", report.failure)
                break
        configs.append(q)
        seed = q
    return configs, report

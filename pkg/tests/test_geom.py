import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation as ScipyRot

from hoi2robot.geom import (
    Aabb,
    Pose,
    Rot3,
    aabb_iou,
    pose_geodesic,
    so3_exp,
    so3_log,
)


def _rand_rot(rng):
    w = rng.normal(size=3)
    w /= np.linalg.norm(w)
    return Rot3(so3_exp(w * rng.uniform(0, math.pi * 0.99)))


def _rand_pose(rng):
    return Pose(_rand_rot(rng), rng.normal(size=3))


class TestSo3Log:
    def test_identity(self):
        assert np.allclose(so3_log(Rot3.identity()), np.zeros(3))

    def test_pi_about_y(self):
        r = Rot3(np.diag([-1.0, 1.0, -1.0]))
        w = so3_log(r)
        assert np.allclose(w, [0.0, math.pi, 0.0], atol=1e-9) or np.allclose(
            w, [0.0, -math.pi, 0.0], atol=1e-9
        )

    def test_roundtrip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            r = _rand_rot(rng)
            assert np.abs(so3_exp(so3_log(r)) - r.m).max() < 1e-9

    def test_matches_scipy_rotvec(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            r = _rand_rot(rng)
            expected = ScipyRot.from_matrix(r.m).as_rotvec()
            assert np.allclose(so3_log(r), expected, atol=1e-8)

    def test_near_pi_branch(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            w = axis * (math.pi - 1e-9)
            r = Rot3(so3_exp(w))
            back = so3_log(r)
            assert abs(np.linalg.norm(back) - (math.pi - 1e-9)) < 1e-6
            # axis recovery near pi is limited to ~sqrt(eps) precision
            assert np.abs(so3_exp(back) - r.m).max() < 1e-7


class TestRot3:
    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            Rot3(np.eye(3) * 2.0)
        with pytest.raises(ValueError):
            Rot3(np.diag([1.0, 1.0, -1.0]))  # det -1

    def test_quat_roundtrip_vs_scipy(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            r = _rand_rot(rng)
            q = r.to_quat_wxyz()
            # scipy uses xyzw ordering
            sq = ScipyRot.from_matrix(r.m).as_quat()
            expected = np.array([sq[3], sq[0], sq[1], sq[2]])
            if expected[0] < 0:
                expected = -expected
            assert np.allclose(q, expected, atol=1e-9)
            assert np.abs(Rot3.from_quat_wxyz(q).m - r.m).max() < 1e-9

    def test_quat_norm_tolerance(self):
        with pytest.raises(ValueError):
            Rot3.from_quat_wxyz([0.9, 0.0, 0.0, 0.0])
        # small deviation is renormalized
        r = Rot3.from_quat_wxyz([1.0 + 5e-4, 0.0, 0.0, 0.0])
        assert np.allclose(r.m, np.eye(3))

    def test_invariants_on_random(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            m = _rand_rot(rng).m
            assert np.abs(m.T @ m - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(m) - 1.0) < 1e-9


class TestPose:
    def test_group_laws(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            a, b, c = _rand_pose(rng), _rand_pose(rng), _rand_pose(rng)
            lhs = (a @ b) @ c
            rhs = a @ (b @ c)
            te, re = pose_geodesic(lhs, rhs)
            assert te < 1e-9 and re < 1e-9
            inv = (a @ b).inverse()
            ref = b.inverse() @ a.inverse()
            te, re = pose_geodesic(inv, ref)
            assert te < 1e-9 and re < 1e-9
            ident = a @ a.inverse()
            te, re = pose_geodesic(ident, Pose.identity())
            assert te < 1e-9 and re < 1e-9

    def test_matrix_roundtrip(self):
        rng = np.random.default_rng(6)
        p = _rand_pose(rng)
        q = Pose.from_matrix(p.to_matrix())
        te, re = pose_geodesic(p, q)
        assert te == 0 and re < 1e-12

    def test_apply_matches_matrix(self):
        rng = np.random.default_rng(7)
        p = _rand_pose(rng)
        pts = rng.normal(size=(10, 3))
        hom = np.column_stack([pts, np.ones(10)])
        expected = (p.to_matrix() @ hom.T).T[:, :3]
        assert np.allclose(p.apply(pts), expected)


class TestPoseGeodesic:
    def test_zero_for_equal(self):
        p = Pose.identity()
        assert pose_geodesic(p, p) == (0.0, 0.0)

    def test_pure_translation(self):
        a = Pose.identity()
        b = Pose(Rot3.identity(), [1.0, 0.0, 0.0])
        assert pose_geodesic(a, b) == (1.0, 0.0)

    def test_rotate_y_half_pi(self):
        b = Pose(Rot3.from_axis_angle([0, math.pi / 2, 0]), np.zeros(3))
        te, re = pose_geodesic(Pose.identity(), b)
        assert te == 0.0
        assert abs(re - math.pi / 2) < 1e-12

    def test_symmetric(self):
        rng = np.random.default_rng(8)
        a, b = _rand_pose(rng), _rand_pose(rng)
        assert pose_geodesic(a, b) == pytest.approx(pose_geodesic(b, a))


class TestAabb:
    def test_identical_unit_cubes(self):
        a = Aabb([0, 0, 0], [1, 1, 1])
        assert aabb_iou(a, a) == 1.0

    def test_disjoint(self):
        a = Aabb([0, 0, 0], [1, 1, 1])
        b = Aabb([2, 2, 2], [3, 3, 3])
        assert aabb_iou(a, b) == 0.0

    def test_half_shifted_cube(self):
        a = Aabb([0, 0, 0], [1, 1, 1])
        b = Aabb([0.5, 0, 0], [1.5, 1, 1])
        assert abs(aabb_iou(a, b) - 0.5 / 1.5) < 1e-12

    def test_zero_volume_union(self):
        a = Aabb([0, 0, 0], [0, 0, 0])
        assert aabb_iou(a, a) == 0.0

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            lo1, lo2 = rng.normal(size=3), rng.normal(size=3)
            a = Aabb(lo1, lo1 + rng.random(3))
            b = Aabb(lo2, lo2 + rng.random(3))
            v = aabb_iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == aabb_iou(b, a)

    def test_min_exceeds_max_rejected(self):
        with pytest.raises(ValueError):
            Aabb([1, 0, 0], [0, 1, 1])

    def test_from_points(self):
        box = Aabb.from_points([[0, 1, 2], [3, -1, 2]])
        assert np.allclose(box.min, [0, -1, 2])
        assert np.allclose(box.max, [3, 1, 2])
        with pytest.raises(ValueError):
            Aabb.from_points(np.empty((0, 3)))

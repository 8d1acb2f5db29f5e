import math

import numpy as np
import pytest

from hoi2robot.augment import (
    HOLD,
    MIRROR_S,
    AugmentSpec,
    MirrorSpec,
    ObjectAsset,
    Segment,
    SimilarityWeights,
    augment_trajectory,
    bind_substitute,
    chamfer_distance,
    mirror_pose,
    mirror_trajectory,
    rank_substitutes,
    remap_open,
    retrieval_score,
    sample_open_anchor,
    screw_component,
    segment_trajectory,
    transform_hold,
)
from hoi2robot.geom import DegenerateGeometryError, Pose, Rot3, pose_geodesic, so3_exp
from hoi2robot.retarget import CLOSED, OPEN, GripperTrajectory
from hoi2robot.synth import box_mesh, icosphere

RY_PI = np.diag([-1.0, 1.0, -1.0])


def _rand_pose(rng, trans_scale=0.3):
    w = rng.normal(size=3)
    w /= np.linalg.norm(w)
    return Pose(Rot3(so3_exp(w * rng.uniform(0, 3.0))), rng.normal(size=3) * trans_scale)


def _traj(poses, commands):
    return GripperTrajectory(list(poses), list(commands))


class TestSegmentation:
    def test_all_open(self):
        rng = np.random.default_rng(0)
        traj = _traj([_rand_pose(rng) for _ in range(7)], [OPEN] * 7)
        segs = segment_trajectory(traj)
        assert segs == [Segment(0, 7, OPEN)]

    def test_open_hold_open(self):
        rng = np.random.default_rng(1)
        cmds = [OPEN] * 5 + [CLOSED] * 10 + [OPEN] * 5
        traj = _traj([_rand_pose(rng) for _ in range(20)], cmds)
        segs = segment_trajectory(traj)
        assert [(s.start, s.end, s.state) for s in segs] == [
            (0, 5, OPEN), (5, 15, HOLD), (15, 20, OPEN)
        ]

    def test_alternating_singletons(self):
        rng = np.random.default_rng(2)
        T = 8
        cmds = [OPEN if t % 2 == 0 else CLOSED for t in range(T)]
        traj = _traj([_rand_pose(rng) for _ in range(T)], cmds)
        segs = segment_trajectory(traj)
        # run-length-encoding oracle
        expected = []
        start = 0
        for t in range(1, T + 1):
            if t == T or cmds[t] != cmds[start]:
                expected.append((start, t, HOLD if cmds[start] == CLOSED else OPEN))
                start = t
        assert [(s.start, s.end, s.state) for s in segs] == expected
        assert len(segs) == T

    def test_partition_covers_trajectory(self):
        rng = np.random.default_rng(3)
        cmds = list(rng.choice([OPEN, CLOSED], size=40))
        traj = _traj([_rand_pose(rng) for _ in range(40)], cmds)
        segs = segment_trajectory(traj)
        assert segs[0].start == 0 and segs[-1].end == 40
        for a, b in zip(segs, segs[1:]):
            assert a.end == b.start


class TestTransformHold:
    def test_identity(self):
        rng = np.random.default_rng(4)
        traj = _traj([_rand_pose(rng) for _ in range(6)], [CLOSED] * 6)
        out = transform_hold(traj, Segment(0, 6, HOLD), Pose.identity())
        for a, b in zip(traj.poses, out):
            te, re = pose_geodesic(a, b)
            assert te < 1e-12 and re < 1e-12

    def test_pure_translation(self):
        rng = np.random.default_rng(5)
        traj = _traj([_rand_pose(rng) for _ in range(6)], [CLOSED] * 6)
        shift = Pose(Rot3.identity(), [0.1, 0.0, 0.0])
        out = transform_hold(traj, Segment(0, 6, HOLD), shift)
        for a, b in zip(traj.poses, out):
            assert np.allclose(b.trans, a.trans + [0.1, 0.0, 0.0])
            assert np.abs(b.rot.m - a.rot.m).max() < 1e-12

    def test_relative_poses_preserved(self):
        rng = np.random.default_rng(6)
        traj = _traj([_rand_pose(rng) for _ in range(6)], [CLOSED] * 6)
        t_o = Pose(Rot3(so3_exp([0, 0, 0.1])), [0.02, -0.01, 0.03])
        out = transform_hold(traj, Segment(0, 6, HOLD), t_o)
        for t in range(5):
            before = traj.poses[t].inverse() @ traj.poses[t + 1]
            after = out[t].inverse() @ out[t + 1]
            te, re = pose_geodesic(before, after)
            assert te < 1e-12 and re < 1e-12

    def test_rotation_cap(self):
        rng = np.random.default_rng(7)
        traj = _traj([_rand_pose(rng) for _ in range(3)], [CLOSED] * 3)
        big = Pose(Rot3(so3_exp([0, 0, 0.5])), np.zeros(3))
        with pytest.raises(ValueError):
            transform_hold(traj, Segment(0, 3, HOLD), big)
        with pytest.raises(ValueError):
            AugmentSpec(object_transform=big)

    def test_requires_hold_segment(self):
        rng = np.random.default_rng(8)
        traj = _traj([_rand_pose(rng) for _ in range(3)], [OPEN] * 3)
        with pytest.raises(ValueError):
            transform_hold(traj, Segment(0, 3, OPEN), Pose.identity())


class TestRemapOpen:
    def test_identity_anchors(self):
        rng = np.random.default_rng(9)
        traj = _traj([_rand_pose(rng) for _ in range(8)], [OPEN] * 8)
        seg = Segment(0, 8, OPEN)
        anchors = (traj.poses[0].trans, traj.poses[-1].trans)
        out = remap_open(traj, seg, anchors, Rot3.identity())
        for a, b in zip(traj.poses, out):
            te, re = pose_geodesic(a, b)
            assert te < 1e-12 and re < 1e-12

    def test_straight_line_maps_to_chord(self):
        # non-uniformly sampled straight path
        s = np.array([0.0, 0.1, 0.15, 0.5, 0.9, 1.0])
        direction = np.array([1.0, 2.0, -1.0])
        poses = [Pose(Rot3.identity(), s_i * direction) for s_i in s]
        traj = _traj(poses, [OPEN] * 6)
        p_hat_s = np.array([5.0, 5.0, 5.0])
        p_hat_e = np.array([6.0, 4.0, 5.5])
        out = remap_open(traj, Segment(0, 6, OPEN), (p_hat_s, p_hat_e), Rot3.identity())
        for s_i, p in zip(s, out):
            expected = p_hat_s + s_i * (p_hat_e - p_hat_s)
            assert np.allclose(p.trans, expected, atol=1e-12)

    def test_endpoints_exact(self):
        rng = np.random.default_rng(10)
        traj = _traj([_rand_pose(rng) for _ in range(10)], [OPEN] * 10)
        p_hat_s, p_hat_e = rng.normal(size=3), rng.normal(size=3)
        out = remap_open(traj, Segment(0, 10, OPEN), (p_hat_s, p_hat_e), Rot3.identity())
        assert np.array_equal(out[0].trans, p_hat_s)
        assert np.array_equal(out[-1].trans, p_hat_e)

    def test_curved_path_preserves_residual(self):
        t = np.linspace(0, 1, 12)
        poses = [
            Pose(Rot3.identity(), [ti, math.sin(math.pi * ti), 0.0]) for ti in t
        ]
        traj = _traj(poses, [OPEN] * 12)
        p = np.array([pp.trans for pp in poses])
        steps = np.linalg.norm(np.diff(p, axis=0), axis=1)
        alpha = np.concatenate([[0.0], np.cumsum(steps)]) / steps.sum()
        p_hat_s, p_hat_e = np.array([2.0, 0.0, 1.0]), np.array([3.0, 0.5, 1.0])
        out = remap_open(traj, Segment(0, 12, OPEN), (p_hat_s, p_hat_e), Rot3.identity())
        for i in range(12):
            chord = p[0] + alpha[i] * (p[-1] - p[0])
            residual = p[i] - chord
            expected = p_hat_s + alpha[i] * (p_hat_e - p_hat_s) + residual
            assert np.allclose(out[i].trans, expected, atol=1e-12)

    def test_rotation_delta_left_multiplied(self):
        rng = np.random.default_rng(11)
        traj = _traj([_rand_pose(rng) for _ in range(5)], [OPEN] * 5)
        r_delta = Rot3(so3_exp([0.1, -0.2, 0.05]))
        anchors = (traj.poses[0].trans, traj.poses[-1].trans)
        out = remap_open(traj, Segment(0, 5, OPEN), anchors, r_delta)
        for a, b in zip(traj.poses, out):
            assert np.abs(b.rot.m - r_delta.m @ a.rot.m).max() < 1e-12

    def test_degenerate_chord(self):
        p = Pose(Rot3.identity(), [1.0, 0.0, 0.0])
        traj = _traj([p, p, p], [OPEN] * 3)
        with pytest.raises(DegenerateGeometryError):
            remap_open(traj, Segment(0, 3, OPEN), (np.zeros(3), np.ones(3)), Rot3.identity())

    def test_frame_progress_mode(self):
        s = np.array([0.0, 0.9, 1.0])
        poses = [Pose(Rot3.identity(), [si, 0, 0]) for si in s]
        traj = _traj(poses, [OPEN] * 3)
        out = remap_open(
            traj, Segment(0, 3, OPEN), (np.zeros(3), np.array([2.0, 0, 0])),
            Rot3.identity(), progress="frame",
        )
        # frame progress is 0, 1/2, 1 regardless of spacing
        assert np.allclose(out[1].trans, [0.9 + (1.0 - 0.5), 0, 0])


class TestMirror:
    def test_position_reflection(self):
        p = mirror_pose(Pose(Rot3.identity(), [1.0, 2.0, 3.0]))
        assert np.allclose(p.trans, [-1.0, 2.0, 3.0])

    def test_identity_maps_to_ry_pi(self):
        p = mirror_pose(Pose.identity())
        assert np.allclose(p.rot.m, RY_PI, atol=1e-12)

    def test_involution_and_det(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            pose = _rand_pose(rng)
            once = mirror_pose(pose)
            assert abs(np.linalg.det(once.rot.m) - 1.0) < 1e-12
            twice = mirror_pose(once)
            assert np.abs(twice.rot.m - pose.rot.m).max() < 1e-12
            assert np.abs(twice.trans - pose.trans).max() < 1e-12

    def test_matches_matrix_formula(self):
        rng = np.random.default_rng(13)
        pose = _rand_pose(rng)
        out = mirror_pose(pose)
        assert np.allclose(out.rot.m, MIRROR_S @ pose.rot.m @ MIRROR_S @ RY_PI, atol=1e-15)

    def test_trajectory_mirror_not_rejected_without_screw(self):
        rng = np.random.default_rng(14)
        T = 12
        hand = _traj([_rand_pose(rng) for _ in range(T)], [OPEN] * T)
        obj = [_rand_pose(rng) for _ in range(T)]
        res = mirror_trajectory(hand, obj, MirrorSpec())
        assert not res.rejected
        assert res.chirality_flipped
        assert len(res.hand) == T and len(res.object) == T

    def test_screw_heavy_hold_rejected(self):
        T = 20
        poses = [Pose(Rot3(so3_exp([0, 0, 0.05 * t])), [0.1, 0, 0]) for t in range(T)]
        hand = _traj(poses, [CLOSED] * T)
        obj = list(poses)
        res = mirror_trajectory(hand, obj, MirrorSpec(tau_screw=0.35))
        assert res.rejected
        assert "screw" in res.reject_reason

    def test_length_mismatch(self):
        rng = np.random.default_rng(15)
        hand = _traj([_rand_pose(rng) for _ in range(3)], [OPEN] * 3)
        with pytest.raises(ValueError):
            mirror_trajectory(hand, [Pose.identity()] * 4, MirrorSpec())


class TestScrewComponent:
    def test_constant_orientation(self):
        poses = [Pose(Rot3.identity(), [0.1 * t, 0, 0]) for t in range(5)]
        assert screw_component(poses, Segment(0, 5, HOLD), [0, 0, 1]) == 0.0

    def test_uniform_z_spin(self):
        T = 10
        total = math.pi / 2
        poses = [Pose(Rot3(so3_exp([0, 0, total * t / (T - 1)])), np.zeros(3)) for t in range(T)]
        got = screw_component(poses, Segment(0, T, HOLD), [0, 0, 1])
        assert abs(got - total) < 1e-9

    def test_orthogonal_axis_zero(self):
        T = 10
        poses = [Pose(Rot3(so3_exp([0.1 * t, 0, 0])), np.zeros(3)) for t in range(T)]
        got = screw_component(poses, Segment(0, T, HOLD), [0, 0, 1])
        assert abs(got) < 1e-9


class TestChamfer:
    def test_identical_sets(self):
        rng = np.random.default_rng(16)
        a = rng.normal(size=(50, 3))
        assert chamfer_distance(a, a) == 0.0

    def test_single_points(self):
        assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == pytest.approx(1.0)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            a = rng.normal(size=(rng.integers(1, 100), 3))
            b = rng.normal(size=(rng.integers(1, 100), 3))
            d_ab = np.linalg.norm(a[:, None] - b[None], axis=2)
            expected = 0.5 * (d_ab.min(axis=1).mean() + d_ab.min(axis=0).mean())
            assert chamfer_distance(a, b) == pytest.approx(expected, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            chamfer_distance(np.empty((0, 3)), np.ones((3, 3)))


class TestRetrieval:
    def _asset(self, aid, mesh, embedding=None):
        return ObjectAsset(id=aid, mesh=mesh, embedding=embedding)

    def test_self_score_zero(self):
        mesh = icosphere(0.05, 1)
        e = np.array([1.0, 2.0, 3.0])
        a = self._asset("a", mesh, e)
        b = self._asset("b", mesh, e.copy())
        assert retrieval_score(a, b, SimilarityWeights()) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_embeddings(self):
        mesh = icosphere(0.05, 1)
        a = self._asset("a", mesh, np.array([1.0, 0.0]))
        b = self._asset("b", mesh, np.array([0.0, 1.0]))
        w = SimilarityWeights(gamma=0.7)
        assert retrieval_score(a, b, w) == pytest.approx(0.7, abs=1e-12)

    def test_jittered_duplicate_scores_worse(self):
        rng = np.random.default_rng(18)
        mesh = icosphere(0.05, 1)
        noisy = type(mesh)(mesh.vertices + rng.normal(scale=0.01, size=mesh.vertices.shape),
                           mesh.triangles)
        src = self._asset("src", mesh)
        w = SimilarityWeights(gamma=0.0)
        assert retrieval_score(src, self._asset("dup", mesh), w) < retrieval_score(
            src, self._asset("noisy", noisy), w
        )

    def test_missing_embedding_drops_term(self, caplog):
        mesh = icosphere(0.05, 1)
        a = self._asset("a", mesh, np.array([1.0, 0.0]))
        b = self._asset("b", mesh)
        assert retrieval_score(a, b, SimilarityWeights()) == pytest.approx(0.0, abs=1e-12)

    def test_rank_self_first_and_brute_force_order(self):
        rng = np.random.default_rng(19)
        mesh = icosphere(0.05, 1)
        lib = [self._asset("self", mesh)]
        for i, sigma in enumerate((0.002, 0.005, 0.01)):
            noisy = type(mesh)(
                mesh.vertices + rng.normal(scale=sigma, size=mesh.vertices.shape),
                mesh.triangles,
            )
            lib.append(self._asset(f"noise{i}", noisy))
        src = self._asset("query", mesh)
        w = SimilarityWeights(gamma=0.0)
        ranked = rank_substitutes(src, lib, w, k=10)
        assert ranked[0].id == "self"
        scores = {a.id: retrieval_score(src, a, w) for a in lib}
        expected = sorted(lib, key=lambda a: (scores[a.id], a.id))
        assert [a.id for a in ranked] == [a.id for a in expected]

    def test_k_larger_than_library(self):
        mesh = icosphere(0.05, 1)
        lib = [self._asset("a", mesh), self._asset("b", mesh)]
        ranked = rank_substitutes(self._asset("s", mesh), lib, SimilarityWeights(gamma=0.0), k=10)
        assert len(ranked) == 2
        # equal scores break ties by id
        assert [a.id for a in ranked] == ["a", "b"]


class TestBindSubstitute:
    def test_identity_rebinding(self):
        mesh = box_mesh(half_extents=(0.06, 0.04, 0.02))
        src = ObjectAsset(id="s", mesh=mesh)
        bound = bind_substitute(src, ObjectAsset(id="c", mesh=mesh))
        assert bound.scale == pytest.approx(1.0)
        assert not bound.pca_fallback
        assert np.abs(bound.alignment.m - np.eye(3)).max() < 1e-9

    def test_double_scale_halved(self):
        mesh = box_mesh(half_extents=(0.06, 0.04, 0.02))
        big = type(mesh)(mesh.vertices * 2.0, mesh.triangles)
        bound = bind_substitute(ObjectAsset(id="s", mesh=mesh), ObjectAsset(id="c", mesh=big))
        assert bound.scale == pytest.approx(0.5)
        assert np.allclose(bound.asset.mesh.aabb_max(), mesh.aabb_max())

    def test_sphere_degenerate_pca_falls_back(self):
        sphere = icosphere(0.05, 1)
        box = box_mesh(half_extents=(0.06, 0.04, 0.02))
        bound = bind_substitute(ObjectAsset(id="s", mesh=box), ObjectAsset(id="c", mesh=sphere))
        assert bound.pca_fallback

    def test_rotated_box_realigned(self):
        mesh = box_mesh(half_extents=(0.06, 0.04, 0.02))
        rot = Rot3(so3_exp([0.0, 0.0, 0.3]))
        turned = type(mesh)(rot.apply(mesh.vertices), mesh.triangles)
        bound = bind_substitute(ObjectAsset(id="s", mesh=mesh), ObjectAsset(id="c", mesh=turned))
        assert not bound.pca_fallback
        # alignment maps the substitute's axes back onto the source's
        assert np.abs(bound.alignment.m - rot.m.T).max() < 1e-6


class TestAugmentTrajectory:
    def test_hold_transformed_open_reanchored(self):
        rng = np.random.default_rng(20)
        T = 15
        cmds = [OPEN] * 5 + [CLOSED] * 5 + [OPEN] * 5
        traj = _traj([_rand_pose(rng) for _ in range(T)], cmds)
        t_o = Pose(Rot3(so3_exp([0, 0, 0.1])), [0.05, 0.0, -0.02])
        out = augment_trajectory(traj, t_o)
        assert len(out) == T
        # hold segment is exactly left-multiplied
        for t in range(5, 10):
            te, re = pose_geodesic(out.poses[t], t_o @ traj.poses[t])
            assert te < 1e-12 and re < 1e-12
        # open segments join the transformed hold continuously
        assert np.allclose(out.poses[4].trans, (t_o @ traj.poses[4]).trans, atol=1e-12)
        assert np.allclose(out.poses[10].trans, (t_o @ traj.poses[10]).trans, atol=1e-12)
        # clip-boundary anchors stay put
        assert np.allclose(out.poses[0].trans, traj.poses[0].trans, atol=1e-12)
        assert np.allclose(out.poses[14].trans, traj.poses[14].trans, atol=1e-12)

    def test_identity_transform_is_identity(self):
        rng = np.random.default_rng(21)
        cmds = [OPEN] * 4 + [CLOSED] * 4 + [OPEN] * 4
        traj = _traj([_rand_pose(rng) for _ in range(12)], cmds)
        out = augment_trajectory(traj, Pose.identity())
        for a, b in zip(traj.poses, out.poses):
            te, re = pose_geodesic(a, b)
            assert te < 1e-12 and re < 1e-12

    def test_sample_open_anchor_in_box(self):
        rng = np.random.default_rng(22)
        lo, hi = np.array([-1.0, 0.0, 2.0]), np.array([1.0, 0.5, 3.0])
        for _ in range(100):
            p = sample_open_anchor(rng, lo, hi)
            assert np.all(p >= lo) and np.all(p <= hi)

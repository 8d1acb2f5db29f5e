import math

import numpy as np
import pytest

from hoi2robot.geom import DegenerateGeometryError, Pose, Rot3, pose_geodesic, so3_exp
from hoi2robot.retarget import (
    CLOSED,
    FINGER_ONLY,
    KP,
    OPEN,
    WHOLE_HAND,
    GestureExemplar,
    HandFrame,
    KeypointTrack,
    RetargetConfig,
    classify_gesture,
    detect_gripper_state,
    gesture_features,
    gripper_pose_fingeronly,
    gripper_pose_wholehand,
    interpolate_pose,
    retarget_trajectory,
)
from hoi2robot.synth import hand_template, pinch_template

SQ2 = math.sqrt(2.0) / 2.0


def make_frame(handedness="right", **overrides) -> HandFrame:
    kp = hand_template().copy()
    for name, val in overrides.items():
        kp[KP[name]] = val
    return HandFrame(kp, handedness)


def _rand_rigid(rng) -> Pose:
    w = rng.normal(size=3)
    w /= np.linalg.norm(w)
    return Pose(Rot3(so3_exp(w * rng.uniform(0, 3.0))), rng.normal(size=3))


class TestGestureClassifier:
    def test_exact_match_k1(self):
        wh = make_frame()
        fo = HandFrame(pinch_template())
        exemplars = [
            GestureExemplar(WHOLE_HAND, gesture_features(wh)),
            GestureExemplar(FINGER_ONLY, gesture_features(fo)),
        ]
        assert classify_gesture(wh, exemplars, k=1) == WHOLE_HAND
        assert classify_gesture(fo, exemplars, k=1) == FINGER_ONLY

    def test_majority_k3(self):
        frame = make_frame()
        f = gesture_features(frame)
        exemplars = [
            GestureExemplar(WHOLE_HAND, f + 0.01),
            GestureExemplar(WHOLE_HAND, f - 0.01),
            GestureExemplar(FINGER_ONLY, f + 0.02),
            GestureExemplar(FINGER_ONLY, f + 5.0),
        ]
        assert classify_gesture(frame, exemplars, k=3) == WHOLE_HAND

    def test_empty_exemplars(self):
        with pytest.raises(ValueError):
            classify_gesture(make_frame(), [], k=1)

    def test_features_scale_and_translation_invariant(self):
        frame = make_frame()
        shifted = HandFrame(frame.keypoints * 2.0 + np.array([1.0, -2.0, 3.0]))
        assert np.allclose(gesture_features(frame), gesture_features(shifted), atol=1e-12)


class TestWholeHandPose:
    def test_worked_example(self):
        frame = make_frame(wrist=(0, 0, 0), index_mcp=(0, 1, 0), ring_mcp=(1, 0, 0))
        pose = gripper_pose_wholehand(frame, d_z=0.0, sign=1)
        m = pose.rot.m
        assert np.allclose(m[:, 0], [1, 0, 0], atol=1e-12)  # x
        assert np.allclose(m[:, 1], [0, -1, 0], atol=1e-12)  # y
        assert np.allclose(m[:, 2], [0, 0, -1], atol=1e-12)  # z
        assert np.allclose(pose.trans, [1 / 3, 1 / 3, 0], atol=1e-12)

    def test_worked_example_dz(self):
        frame = make_frame(wrist=(0, 0, 0), index_mcp=(0, 1, 0), ring_mcp=(1, 0, 0))
        pose = gripper_pose_wholehand(frame, d_z=0.05, sign=1)
        assert np.allclose(pose.trans, [1 / 3, 1 / 3, -0.05], atol=1e-12)

    def test_collinear_rejected(self):
        frame = make_frame(wrist=(0, 0, 0), index_mcp=(0.5, 0, 0), ring_mcp=(1, 0, 0))
        with pytest.raises(DegenerateGeometryError):
            gripper_pose_wholehand(frame)

    def test_left_hand_flips_palm_normal(self):
        kp = hand_template()
        right = gripper_pose_wholehand(HandFrame(kp, "right"))
        left = gripper_pose_wholehand(HandFrame(kp, "left"))
        assert np.dot(right.rot.m[:, 2], left.rot.m[:, 2]) < 0

    def test_equivariance(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            frame = make_frame()
            T = _rand_rigid(rng)
            moved = HandFrame(T.apply(frame.keypoints), frame.handedness)
            lhs = gripper_pose_wholehand(moved, d_z=0.02, sign=1)
            rhs = T @ gripper_pose_wholehand(frame, d_z=0.02, sign=1)
            te, re = pose_geodesic(lhs, rhs)
            assert te < 1e-12
            assert re < 1e-9


class TestFingerOnlyPose:
    def test_worked_example(self):
        frame = make_frame(
            index_tip=(0, 0, 0.1),
            index_mcp=(0, 0, 0),
            thumb_tip=(0.03, 0, 0.09),
            thumb_mcp=(0.02, -0.02, 0),
        )
        pose = gripper_pose_fingeronly(frame)
        m = pose.rot.m
        assert np.allclose(pose.trans, [0.015, 0, 0.095], atol=1e-12)
        assert np.allclose(m[:, 2], [0, 0, 1], atol=1e-12)  # z
        assert np.allclose(m[:, 1], [-SQ2, -SQ2, 0], atol=1e-9)  # y
        assert np.allclose(m[:, 0], [-SQ2, SQ2, 0], atol=1e-9)  # x

    def test_degenerate_index(self):
        frame = make_frame(index_tip=(0.03, 0.09, 0.0), index_mcp=(0.03, 0.09, 0.0))
        with pytest.raises(DegenerateGeometryError):
            gripper_pose_fingeronly(frame)

    def test_tips_coincide_midpoint(self):
        p = (0.05, 0.12, 0.02)
        frame = make_frame(
            index_tip=p, thumb_tip=p, index_mcp=(0, 0.09, 0), thumb_mcp=(0.05, 0.04, 0)
        )
        pose = gripper_pose_fingeronly(frame)
        assert np.allclose(pose.trans, p, atol=1e-12)

    def test_equivariance(self):
        rng = np.random.default_rng(1)
        base = HandFrame(pinch_template())
        for _ in range(100):
            T = _rand_rigid(rng)
            moved = HandFrame(T.apply(base.keypoints))
            lhs = gripper_pose_fingeronly(moved)
            rhs = T @ gripper_pose_fingeronly(base)
            te, re = pose_geodesic(lhs, rhs)
            assert te < 1e-12
            assert re < 1e-9

    def test_rotations_are_valid(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            T = _rand_rigid(rng)
            wh = gripper_pose_wholehand(HandFrame(T.apply(hand_template())))
            fo = gripper_pose_fingeronly(HandFrame(T.apply(pinch_template())))
            for m in (wh.rot.m, fo.rot.m):
                assert np.abs(m.T @ m - np.eye(3)).max() < 1e-9
                assert abs(np.linalg.det(m) - 1.0) < 1e-9


def _track(positions):
    positions = np.asarray(positions, dtype=np.float64)
    return KeypointTrack(positions, np.ones(positions.shape[:2], dtype=bool))


class TestGripperState:
    def test_static_all_open(self):
        pos = np.tile(np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]), (20, 1, 1))
        assert detect_gripper_state(_track(pos)) == [OPEN] * 20

    def test_moving_closed_after_window(self):
        T = 20
        pos = np.zeros((T, 1, 3))
        pos[:, 0, 0] = 0.02 * np.arange(T)
        states = detect_gripper_state(_track(pos), window=5, threshold=0.005, hysteresis=1)
        assert states[:5] == [OPEN] * 5
        assert states[5:] == [CLOSED] * (T - 5)

    def test_hysteresis_delays_flip(self):
        T = 20
        pos = np.zeros((T, 1, 3))
        pos[:, 0, 0] = 0.02 * np.arange(T)
        states = detect_gripper_state(_track(pos), window=5, threshold=0.005, hysteresis=3)
        assert states[:7] == [OPEN] * 7
        assert states[7:] == [CLOSED] * (T - 7)

    def test_single_frame_spike_suppressed(self):
        T = 30
        pos = np.zeros((T, 1, 3))
        pos[12, 0, 0] = 0.05  # one-frame jitter spike
        states = detect_gripper_state(_track(pos), window=5, threshold=0.005, hysteresis=3)
        assert states == [OPEN] * T

    def test_2d_pixel_threshold_default(self):
        T = 15
        pos = np.zeros((T, 1, 2))
        pos[:, 0, 0] = 3.0 * np.arange(T)  # 3 px/frame > default 2 px
        states = detect_gripper_state(_track(pos), window=5, hysteresis=1)
        assert states[-1] == CLOSED

    def test_distractor_keypoints_do_not_flip_state(self):
        T = 20
        moving = np.zeros((T, 1, 3))
        moving[:, 0, 0] = 0.1 * np.arange(T)
        with_distractor = np.concatenate([moving, np.full((T, 1, 3), 0.3)], axis=1)
        a = detect_gripper_state(_track(moving), window=5, threshold=0.005, hysteresis=1)
        b = detect_gripper_state(_track(with_distractor), window=5, threshold=0.005, hysteresis=1)
        assert a == b

    def test_invalid_window_carries_over(self):
        T = 12
        pos = np.zeros((T, 1, 3))
        pos[:, 0, 0] = 0.05 * np.arange(T)
        valid = np.ones((T, 1), dtype=bool)
        valid[8:] = False  # tracking lost; state carries over
        states = detect_gripper_state(
            KeypointTrack(pos, valid), window=5, threshold=0.005, hysteresis=1
        )
        assert states[8:] == [CLOSED] * 4


class TestRetargetTrajectory:
    def test_single_frame_clip(self):
        frame = make_frame()
        traj = retarget_trajectory([frame], None, RetargetConfig(gesture_override=WHOLE_HAND))
        assert len(traj) == 1
        expected = gripper_pose_wholehand(frame)
        te, re = pose_geodesic(traj.poses[0], expected)
        assert te < 1e-12 and re < 1e-12

    def test_static_clip_constant_open(self):
        frames = [make_frame()] * 8
        pos = np.tile(hand_template()[:4][None], (8, 1, 1))
        tracks = _track(pos)
        traj = retarget_trajectory(frames, tracks, RetargetConfig(gesture_override=WHOLE_HAND))
        assert traj.commands == [OPEN] * 8
        for p in traj.poses[1:]:
            te, re = pose_geodesic(p, traj.poses[0])
            assert te < 1e-12 and re < 1e-12

    def test_gesture_majority_per_clip(self):
        wh = make_frame()
        fo = HandFrame(pinch_template())
        exemplars = [
            GestureExemplar(WHOLE_HAND, gesture_features(wh)),
            GestureExemplar(FINGER_ONLY, gesture_features(fo)),
        ]
        traj = retarget_trajectory([wh, wh, fo], None, RetargetConfig(exemplars=exemplars, k=1))
        assert traj.gesture == WHOLE_HAND

    def test_two_frame_gap_interpolated(self, caplog):
        good = [make_frame(wrist=(0.01 * t, 0, 0)) for t in range(6)]
        degen = make_frame(wrist=(0, 0, 0), index_mcp=(0.5, 0, 0), ring_mcp=(1, 0, 0))
        frames = [good[0], good[1], degen, degen, good[4], good[5]]
        traj = retarget_trajectory(frames, None, RetargetConfig(gesture_override=WHOLE_HAND))
        assert len(traj) == 6
        assert traj.interpolated == [2, 3]
        left = gripper_pose_wholehand(good[1])
        right = gripper_pose_wholehand(good[4])
        for j, alpha in ((2, 1 / 3), (3, 2 / 3)):
            te, re = pose_geodesic(traj.poses[j], interpolate_pose(left, right, alpha))
            assert te < 1e-12 and re < 1e-12

    def test_long_gap_is_error(self):
        degen = make_frame(wrist=(0, 0, 0), index_mcp=(0.5, 0, 0), ring_mcp=(1, 0, 0))
        frames = [make_frame()] + [degen] * 4 + [make_frame()]
        with pytest.raises(DegenerateGeometryError):
            retarget_trajectory(frames, None, RetargetConfig(gesture_override=WHOLE_HAND))

    def test_empty_clip(self):
        with pytest.raises(ValueError):
            retarget_trajectory([], None, RetargetConfig(gesture_override=WHOLE_HAND))


class TestHandFrame:
    def test_bone_validation(self):
        make_frame().validate_bones()  # template is plausible
        bad = make_frame(index_tip=(1.0, 1.0, 1.0))
        with pytest.raises(ValueError):
            bad.validate_bones()

    def test_bad_handedness(self):
        with pytest.raises(ValueError):
            HandFrame(hand_template(), "both")

    def test_interpolate_pose_endpoints(self):
        rng = np.random.default_rng(3)
        a, b = _rand_rigid(rng), _rand_rigid(rng)
        for alpha, ref in ((0.0, a), (1.0, b)):
            te, re = pose_geodesic(interpolate_pose(a, b, alpha), ref)
            assert te < 1e-12 and re < 1e-9

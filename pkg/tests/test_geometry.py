import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import G, K, random_pose
from probgrasp.geometry import (
    CameraIntrinsics,
    GeometryError,
    GripperModel,
    Pose,
    gripper_keypoints_3d,
    look_at,
    pose_compose,
    pose_inverse,
    project,
    quat_from_matrix_batch,
    random_rotation,
    rotation_angle,
    se3_exp,
    se3_log,
    so3_exp,
    so3_exp_batch,
    so3_log,
    so3_log_batch,
)

finite = st.floats(-1.0, 1.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)


def test_identity_compose():
    p = Pose.from_rotvec([0.1, 0.2, 0.3], [1, 2, 3])
    q = Pose.identity() @ p
    np.testing.assert_allclose(q.matrix(), p.matrix(), atol=1e-12)


def test_compose_inverse_is_identity():
    p = Pose.from_rotvec([0.4, -0.2, 0.9], [0.1, 0.2, -0.3])
    q = p @ pose_inverse(p)
    np.testing.assert_allclose(q.matrix(), np.eye(4), atol=1e-12)


def test_compose_matches_sequential_application():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = random_pose(rng), random_pose(rng)
        x = rng.normal(size=(5, 3))
        np.testing.assert_allclose(pose_compose(a, b).apply(x), a.apply(b.apply(x)), atol=1e-12)


def test_inverse_examples():
    np.testing.assert_allclose(pose_inverse(Pose.identity()).matrix(), np.eye(4))
    np.testing.assert_allclose(pose_inverse(Pose(trans=[0, 0, 0.5])).trans, [0, 0, -0.5])
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = random_pose(rng)
        pp = pose_inverse(pose_inverse(p))
        np.testing.assert_allclose(pp.matrix(), p.matrix(), atol=1e-9)
        np.testing.assert_allclose((pose_inverse(p) @ p).matrix(), np.eye(4), atol=1e-9)


def test_exp_examples():
    np.testing.assert_allclose(se3_exp(np.zeros(6)).matrix(), np.eye(4))
    p = se3_exp([0, 0, math.pi / 2, 0, 0, 0])
    np.testing.assert_allclose(p.R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    np.testing.assert_allclose(p.trans, 0)


def test_exp_log_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        p = random_pose(rng)
        if rotation_angle(p) > math.pi - 1e-6:
            continue
        q = se3_exp(se3_log(p))
        np.testing.assert_allclose(q.matrix(), p.matrix(), atol=1e-9)


def test_log_singular_at_pi():
    with pytest.raises(GeometryError, match="log map singular"):
        se3_log(Pose(np.array([0.0, 1.0, 0.0, 0.0])))


def test_log_local_composition_first_order():
    rng = np.random.default_rng(3)
    for _ in range(100):
        p = random_pose(rng)
        d = rng.normal(size=6)
        d *= 1e-3 / np.linalg.norm(d)
        got = se3_log(se3_exp(d) @ p @ pose_inverse(p))
        assert np.linalg.norm(got - d) <= 1e-6


def test_so3_log_batch_matches_scalar_and_small_angles():
    rng = np.random.default_rng(4)
    phis = np.concatenate([rng.normal(size=(50, 3)), 1e-9 * rng.normal(size=(5, 3)), 3.1 * np.eye(3)])
    R = so3_exp_batch(phis)
    out = so3_log_batch(R)
    np.testing.assert_allclose(so3_exp_batch(out), R, atol=1e-12)
    np.testing.assert_allclose(so3_log(R[0]), out[0], atol=1e-15)
    np.testing.assert_allclose(so3_exp(phis[0]), R[0], atol=1e-15)


def test_quaternion_is_canonical():
    rng = np.random.default_rng(5)
    q = quat_from_matrix_batch(np.array([random_rotation(rng) for _ in range(200)]))
    assert np.all(q[:, 0] >= 0)
    np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-15)


def test_from_stored_is_bit_exact_and_validates():
    p = random_pose(np.random.default_rng(6))
    q = Pose.from_stored([float(v) for v in p.quat], p.trans)
    assert np.array_equal(q.quat, p.quat)
    with pytest.raises(GeometryError):
        Pose.from_stored([0.5, 0.5, 0.5, 0.5 + 1e-3], [0, 0, 0])
    with pytest.raises(GeometryError):
        Pose.from_stored([-1.0, 0, 0, 0], [0, 0, 0])


def test_project_examples():
    k = CameraIntrinsics(100.0, 100.0, 0.0, 0.0)
    np.testing.assert_allclose(project(k, [0.1, 0.0, 1.0]), [10.0, 0.0])
    for z in (0.01, 1.0, 50.0):
        np.testing.assert_allclose(project(K, [0.0, 0.0, z]), [K.cx, K.cy])
    with pytest.raises(GeometryError, match="point behind or on camera plane"):
        project(K, [0.0, 0.0, 0.0])
    with pytest.raises(GeometryError):
        project(K, [0.1, 0.0, -1.0])


@given(vec3, st.floats(0.1, 5.0), st.floats(0.01, 100.0))
def test_project_depth_invariance(xy, z, s):
    p = np.array([xy[0], xy[1], z])
    np.testing.assert_allclose(project(K, s * p), project(K, p), rtol=1e-9, atol=1e-9)


def test_intrinsics_validation():
    with pytest.raises(GeometryError):
        CameraIntrinsics(fx=0.0)
    with pytest.raises(GeometryError):
        CameraIntrinsics(width=0)


def test_gripper_corners_examples():
    np.testing.assert_allclose(gripper_keypoints_3d(G, Pose.identity()), G.corners)
    t = np.array([0.1, 0.2, 0.3])
    np.testing.assert_allclose(gripper_keypoints_3d(G, Pose(trans=t)), G.corners + t)
    assert G.corners.shape == (4, 3)
    assert np.linalg.matrix_rank(G.corners - G.corners.mean(axis=0)) >= 2


def test_gripper_symmetry_permutes_corners():
    flipped = gripper_keypoints_3d(G, GripperModel.symmetry_pose())
    np.testing.assert_allclose(flipped, G.corners[list(GripperModel.symmetry_permutation)], atol=1e-15)


def test_gripper_keypoint_equivariance():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a, b = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose(gripper_keypoints_3d(G, a @ b), a.apply(gripper_keypoints_3d(G, b)), atol=1e-12)


def test_gripper_validation():
    with pytest.raises(GeometryError):
        GripperModel(open_width=0.0)


@settings(max_examples=50)
@given(vec3)
def test_exp_preserves_rotation_properties(phi):
    R = so3_exp(np.array(phi))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1.0) < 1e-12


def test_look_at_points_optical_axis_at_target():
    cam = look_at([0.5, 0.2, 0.6], [0.0, 0.0, 0.0])
    local = pose_inverse(cam).apply([0.0, 0.0, 0.0])
    assert local[2] > 0
    np.testing.assert_allclose(local[:2], 0, atol=1e-12)
    down = look_at([0.0, 0.0, 1.0], [0.0, 0.0, 0.0])
    assert pose_inverse(down).apply([0.0, 0.0, 0.0])[2] > 0

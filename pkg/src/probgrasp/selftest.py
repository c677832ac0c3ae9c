"""Embedded example fixtures run by ``probgrasp selftest``.

Each check is a small closed-form case with an obvious expected answer.
"""

from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from .geometry import (
    CameraIntrinsics,
    GeometryError,
    GripperModel,
    Pose,
    gripper_keypoints_3d,
    pose_inverse,
    project,
    rotation_angle,
    se3_exp,
)
from .keypoint_codec import KeypointMap, decode_keypoints, encode_keypoints, focal_loss, l1_offset_loss
from .matching import PoseDistanceParams, nn_match, pose_distance
from .metrics import SuccessThresholds, emit_report, evaluate, grasp_success, load_report_csv
from .pnp import CorrespondenceSet, PnPError, SolverConfig, multi_start_solve, reproj_error, solve_pnp, weighted_cost
from .prob_pnp import MCSampleSet, grad_from_samples, kl_loss, l_pred, log_likelihood
from .scene import (
    NoiseModel,
    PrimitiveObject,
    SceneConfig,
    SceneFormatError,
    format_scene,
    grasp_labels_for_primitive,
    observe_scene,
    parse_scene,
    sample_scene,
    scenes_equal,
)
from .trainer import LRSchedule, lr_schedule

K = CameraIntrinsics()
G = GripperModel()


def _close(a, b, tol=1e-9):
    assert np.allclose(a, b, atol=tol, rtol=0), f"{a} != {b}"


def _raises(exc, fn, text=None):
    try:
        fn()
    except exc as e:
        assert text is None or text in str(e), f"message {e!r} lacks {text!r}"
        return
    raise AssertionError(f"{exc.__name__} not raised")


def _pose():
    return Pose.from_rotvec([0.3, -0.2, 0.5], [0.01, -0.02, 0.5])


def _observed(pose=None, shift=None):
    pose = pose or _pose()
    p2d = project(K, pose.apply(G.corners))
    if shift is not None:
        p2d = p2d + shift
    return CorrespondenceSet(p2d, G.corners, np.ones((4, 2)), K)


# geometry


def compose_identity():
    p = _pose()
    q = Pose.identity() @ p
    _close(q.quat, p.quat)
    _close(q.trans, p.trans)


def compose_inverse():
    q = _pose() @ pose_inverse(_pose())
    assert rotation_angle(q) < 1e-9
    _close(q.trans, 0)


def inverse_translation():
    _close(pose_inverse(Pose(trans=[0, 0, 0.5])).trans, [0, 0, -0.5])
    _close(pose_inverse(Pose.identity()).quat, [1, 0, 0, 0])


def exp_zero_and_quarter_turn():
    _close(se3_exp(np.zeros(6)).matrix(), np.eye(4))
    p = se3_exp([0, 0, math.pi / 2, 0, 0, 0])
    _close(p.R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], 1e-12)
    _close(p.trans, 0)


def pinhole_projection():
    k = CameraIntrinsics(100.0, 100.0, 0.0, 0.0)
    _close(project(k, [0.1, 0.0, 1.0]), [10.0, 0.0])
    _close(project(K, [0.0, 0.0, 2.7]), [K.cx, K.cy])
    _raises(GeometryError, lambda: project(K, [0.0, 0.0, 0.0]), "behind")


def gripper_corners():
    _close(gripper_keypoints_3d(G, Pose.identity()), G.corners)
    t = np.array([0.1, -0.2, 0.3])
    _close(gripper_keypoints_3d(G, Pose(trans=t)), G.corners + t)


# pnp


def residual_sign():
    X = _observed()
    _close(reproj_error(X.items[0], K, _pose()), 0, 1e-9)
    X = _observed(shift=np.array([3.0, -4.0]))
    _close(reproj_error(X.items[0], K, _pose()), [-3.0, 4.0], 1e-9)


def weighted_cost_values():
    X = _observed(shift=5.0)
    assert weighted_cost(X.replace(w2d=np.zeros((4, 2))), _pose()) == 0.0
    one = CorrespondenceSet([[K.cx - 1.0, K.cy - 1.0]], [[0.0, 0.0, 0.0]], [[1.0, 1.0]], K)
    _close(weighted_cost(one, Pose(trans=[0, 0, 1.0])), 1.0)


def solve_at_truth():
    rep = solve_pnp(_observed(), _pose())
    assert rep.converged and rep.iterations <= 2 and rep.cost < 1e-16, rep


def solve_zero_weights():
    X = _observed().replace(w2d=np.zeros((4, 2)))
    _raises(PnPError, lambda: solve_pnp(X, _pose()), "underdetermined")


def duplicate_starts():
    X = _observed(shift=np.array([[0.5, -0.2], [0.1, 0.3], [-0.4, 0.0], [0.2, 0.2]]))
    s = Pose.from_rotvec([0.35, -0.1, 0.45], [0.0, -0.01, 0.52])
    a = multi_start_solve(X, SolverConfig(), starts=[s])
    b = multi_start_solve(X, SolverConfig(), starts=[s, s, s])
    _close(a.pose.matrix(), b.pose.matrix(), 0)


# probabilistic layer


def likelihood_definition():
    X = _observed()
    assert abs(log_likelihood(X, _pose())) < 1e-20
    one = CorrespondenceSet([[K.cx - 2.0, K.cy]], [[0.0, 0.0, 0.0]], [[1.0, 1.0]], K)
    _close(log_likelihood(one, Pose(trans=[0, 0, 1.0])), -2.0)


def _fake_samples(v):
    n = len(v)
    return MCSampleSet(np.repeat(np.eye(3)[None], n, 0), np.zeros((n, 3)), np.zeros(n), np.log(np.asarray(v, float)))


def log_mean_weight():
    _close(l_pred(_fake_samples([1.0])), 0.0)
    _close(l_pred(_fake_samples([1.0, 3.0])), math.log(2.0))


def kl_noiseless_target():
    X = _observed()
    res = kl_loss([(X, _pose())], rng=0)
    g = res.per_grasp[0]
    assert g.target_cost < 1e-20
    _close(res.loss, g.l_pred, 1e-12)


def kl_zero_weight_gradient():
    X = _observed(shift=np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0], [0.0, 0.0]]))
    X = X.replace(w2d=np.array([[0.0, 0.0], [1, 1], [1, 1], [1, 1]], float))
    X5 = X.replace(p3d=np.vstack([X.p3d, [0.0, 0.0, 0.02]]), p2d=np.vstack([X.p2d, project(K, _pose().apply([0, 0, 0.02]))]),
                   w2d=np.vstack([X.w2d, [1.0, 1.0]]))
    s = kl_loss([(X5, _pose())], rng=0).per_grasp[0].samples
    d_p, _ = grad_from_samples(X5, _pose(), s)
    _close(d_p[0], 0, 0)


# codec


def codec_arithmetic():
    m = KeypointMap.empty(160, 120, 4)
    m.H[12, 10] = 1.0
    m.S[12, 10] = (0.3, 0.4)
    m.O[12, 10, 0] = (5.0, -2.0)
    d = decode_keypoints(m)
    assert len(d) == 1
    _close(d[0].keypoints[0], [45.3, 46.4], 1e-12)


def codec_empty_and_threshold():
    m = KeypointMap.empty(64, 64, 4)
    assert decode_keypoints(m) == []
    m.H[3, 3] = 0.5
    assert decode_keypoints(m, threshold=0.6) == []


def codec_cell_corner_and_two_peaks():
    kp = np.array([[[-10.0, 0.0], [10.0, 0.0], [-10.0, 8.0], [10.0, 8.0]]] * 2)
    enc = encode_keypoints(np.array([[40.0, 40.0]]), kp[:1] + 40.0, 320, 240)
    u, v = enc.cells[0]
    _close(enc.map.S[v, u], 0, 0)
    enc = encode_keypoints(np.array([[40.0, 40.0], [250.0, 180.0]]), kp + [[[40.0, 40.0]], [[250.0, 180.0]]], 320, 240)
    assert [d.score for d in decode_keypoints(enc.map)] == [1.0, 1.0]


def focal_and_l1():
    gt = np.zeros((8, 8))
    gt[2, 3] = 1.0
    assert focal_loss(np.clip(gt, 1e-6, 1 - 1e-6), gt) < 1e-4
    assert focal_loss(np.full((8, 8), 0.5), gt) >= 0.0
    pred, tgt = np.zeros((4, 4, 2)), np.zeros((4, 4, 2))
    mask = np.zeros((4, 4), bool)
    mask[1, 1] = True
    assert l1_offset_loss(tgt, tgt, mask) == 0.0
    pred[1, 1] = (3.0, -1.0)
    pred[0, 0] = (100.0, 100.0)
    _close(l1_offset_loss(pred, tgt, mask), 2.0)


# matching


def distance_values():
    p = _pose()
    assert pose_distance(p, p) == 0.0
    _close(pose_distance(p, Pose(p.quat, p.trans + [0.02, 0, 0])), 0.02)
    q = Pose.from_matrix(Pose.from_rotvec([0.1, 0, 0]).R @ p.R, p.trans)
    _close(pose_distance(p, q, PoseDistanceParams(rho=0.05)), 0.005)


def match_identical():
    p = _pose()
    r = nn_match([p], [Pose(trans=[1, 1, 1]), p])
    assert r.assignments == [(0, 1, 0.0)], r.assignments


# scene


def oversize_sphere():
    assert grasp_labels_for_primitive(PrimitiveObject("Sphere", (0.05,), Pose()), G) == []


def scene_determinism_and_filters():
    a, b = sample_scene(SceneConfig(), 11), sample_scene(SceneConfig(), 11)
    assert scenes_equal(a, b)
    for i in range(len(a.grasps)):
        assert np.all(K.contains(project(K, a.grasp_in_camera(i).apply(G.corners))))


def noiseless_and_outlier_observation():
    s = sample_scene(SceneConfig(), 12)
    for ob in observe_scene(s, NoiseModel(), 0):
        assert weighted_cost(ob.correspondences, ob.target) < 1e-20
    for ob in observe_scene(s, NoiseModel(outlier_fraction=0.25), 0):
        assert int(ob.corrupted.sum()) == 1


def scene_file_round_trip():
    s = sample_scene(SceneConfig(n_objects=5), 13)
    text = format_scene(s)
    assert scenes_equal(parse_scene(text), s)
    _raises(SceneFormatError, lambda: parse_scene("\n".join(text.splitlines()[:-2])), "truncated")
    bad = text.replace("OBJECT 0 " + s.objects[0].category, "OBJECT 0 Teapot")
    _raises(SceneFormatError, lambda: parse_scene(bad), "Teapot")


# trainer


def lr_steps():
    c = LRSchedule(0.1, (10, 20), 0.1)
    assert lr_schedule(5, c) == 0.1
    assert lr_schedule(7, LRSchedule(0.1)) == 0.1


# metrics


def success_thresholds():
    p = _pose()
    off = Pose(p.quat, p.trans + [0.012, 0, 0])
    assert grasp_success(p, [p], SuccessThresholds(0.001, 1.0))[0]
    assert not grasp_success(off, [p], SuccessThresholds(0.010, 10.0))[0]
    assert grasp_success(off, [p], SuccessThresholds(0.015, 10.0))[0]


def success_rates_and_csv():
    gts = [Pose(trans=[0.1 * i, 0, 0.5]) for i in range(4)]
    preds = gts[:3] + [Pose(trans=[5.0, 5.0, 5.0])]
    th = SuccessThresholds(0.01, 10.0)
    r = evaluate([preds], [gts], [th]).results[0]
    assert r.success_rate == 0.75
    r = evaluate([gts], [gts], [th]).results[0]
    assert r.success_rate == 1.0 and r.coverage_rate == 1.0
    grid = [SuccessThresholds(c / 100, d) for c in (1.0, 2.0) for d in (10.0, 20.0, 45.0)]
    rep = evaluate([preds], [gts], grid)
    with tempfile.TemporaryDirectory() as d:
        csv_path, _ = emit_report(rep, Path(d) / "r")
        rows = load_report_csv(csv_path)
        assert len(rows) == 6
        assert all(row["success_rate"] == g.success_rate for row, g in zip(rows, rep.results))
        csv_path, _ = emit_report(evaluate([], [], []), Path(d) / "empty")
        assert len(csv_path.read_text().splitlines()) == 1


CHECKS = [
    compose_identity,
    compose_inverse,
    inverse_translation,
    exp_zero_and_quarter_turn,
    pinhole_projection,
    gripper_corners,
    residual_sign,
    weighted_cost_values,
    solve_at_truth,
    solve_zero_weights,
    duplicate_starts,
    likelihood_definition,
    log_mean_weight,
    kl_noiseless_target,
    kl_zero_weight_gradient,
    codec_arithmetic,
    codec_empty_and_threshold,
    codec_cell_corner_and_two_peaks,
    focal_and_l1,
    distance_values,
    match_identical,
    oversize_sphere,
    scene_determinism_and_filters,
    noiseless_and_outlier_observation,
    scene_file_round_trip,
    lr_steps,
    success_thresholds,
    success_rates_and_csv,
]


def run_selftest(emit=print) -> bool:
    failed = 0
    for check in CHECKS:
        try:
            check()
        except Exception as exc:  # report every failure, keep going
            failed += 1
            emit(f"FAIL {check.__name__}: {type(exc).__name__}: {exc}")
        else:
            emit(f"ok   {check.__name__}")
    emit(f"{len(CHECKS) - failed}/{len(CHECKS)} checks passed")
    return failed == 0

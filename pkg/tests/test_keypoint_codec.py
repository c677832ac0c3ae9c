import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import G, K
from probgrasp.geometry import Pose
from probgrasp.keypoint_codec import (
    KeypointMap,
    decode_keypoints,
    encode_grasps,
    encode_keypoints,
    focal_loss,
    focal_loss_grad,
    grasp_keypoints_2d,
    l1_offset_loss,
    l1_offset_loss_grad,
    load_map,
    save_map,
)
from probgrasp.scene import SceneFormatError

BOX = np.array([[-12.0, -3.0], [12.0, -3.0], [-12.0, 6.0], [12.0, 6.0]])


def test_map_validation():
    with pytest.raises(ValueError):
        KeypointMap(np.zeros((2, 2)), np.zeros((2, 3, 2)), np.zeros((2, 2, 4, 2)), np.zeros((2, 2, 4, 2)))
    with pytest.raises(ValueError):
        KeypointMap(np.full((2, 2), 1.5), np.zeros((2, 2, 2)), np.zeros((2, 2, 4, 2)), np.zeros((2, 2, 4, 2)))
    with pytest.raises(ValueError):
        KeypointMap.empty(8, 8, 0)
    assert KeypointMap.empty(641, 480, 4).shape == (120, 161)


def test_center_on_cell_corner_gives_zero_offset():
    enc = encode_keypoints([[40.0, 80.0]], [BOX + [40.0, 80.0]], 640, 480)
    assert enc.cells == [(10, 20)]
    np.testing.assert_array_equal(enc.map.S[20, 10], [0.0, 0.0])
    np.testing.assert_allclose(enc.map.O[20, 10], BOX)


def test_two_separated_grasps_two_unit_peaks():
    c = np.array([[60.0, 60.0], [400.0, 300.0]])
    enc = encode_keypoints(c, BOX[None] + c[:, None], 640, 480)
    dets = decode_keypoints(enc.map)
    assert [d.score for d in dets] == [1.0, 1.0]
    assert np.all((enc.map.H >= 0) & (enc.map.H <= 1))


def test_outside_center_is_skipped_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        enc = encode_keypoints([[-5.0, 10.0], [100.0, 100.0]], [BOX, BOX + 100.0], 640, 480)
    assert enc.skipped == 1 and enc.cells[0] is None and enc.cells[1] == (25, 25)
    assert "outside the image" in caplog.text


def test_decode_arithmetic():
    m = KeypointMap.empty(160, 120, 4)
    m.H[12, 10] = 1.0
    m.S[12, 10] = (0.3, 0.4)
    m.O[12, 10, 0] = (5.0, -2.0)
    (d,) = decode_keypoints(m)
    np.testing.assert_allclose(d.keypoints[0], [45.3, 46.4], atol=1e-12)
    np.testing.assert_allclose(d.center, [40.3, 48.4], atol=1e-12)
    assert d.cell == (10, 12)


def test_decode_empty_and_threshold():
    m = KeypointMap.empty(64, 64, 4)
    assert decode_keypoints(m) == []
    m.H[5, 5] = 0.6
    assert decode_keypoints(m, threshold=0.7) == []
    assert len(decode_keypoints(m, threshold=0.5)) == 1


def test_decode_orders_by_score_and_caps_top_k():
    m = KeypointMap.empty(160, 160, 4)
    for i, s in enumerate([0.4, 0.9, 0.7, 0.9]):
        m.H[5 + 8 * i, 5] = s
    dets = decode_keypoints(m)
    assert [d.score for d in dets] == [0.9, 0.9, 0.7, 0.4]
    # equal scores keep row-major order
    assert [d.cell for d in dets[:2]] == [(5, 13), (5, 29)]
    assert len(decode_keypoints(m, top_k=2)) == 2


def test_round_trip_on_projected_grasps():
    rng = np.random.default_rng(0)
    for _ in range(20):
        poses = []
        for j in range(3):
            t = np.array([-0.15 + 0.15 * j, rng.uniform(-0.05, 0.05), rng.uniform(0.45, 0.6)])
            poses.append(Pose.from_rotvec(rng.normal(0, 0.3, 3) + [1.4, 0, 0], t))
        enc = encode_grasps(poses, K, G)
        dets = {d.cell: d for d in decode_keypoints(enc.map)}
        for p, cell in zip(poses, enc.cells):
            _, kp = grasp_keypoints_2d(K, G, p)
            np.testing.assert_allclose(dets[cell].keypoints, kp, atol=1e-4)


def test_encode_grasps_behind_camera_is_skipped():
    enc = encode_grasps([Pose(trans=[0, 0, -1.0])], K, G)
    assert enc.skipped == 1 and enc.map.H.max() == 0.0
    assert encode_grasps([], K, G).cells == []


def test_focal_loss_examples():
    gt = np.zeros((10, 12))
    gt[3, 4] = 1.0
    assert focal_loss(np.clip(gt, 1e-6, 1 - 1e-6), gt) < 1e-4
    with pytest.raises(ValueError):
        focal_loss(np.zeros((2, 2)), np.zeros((3, 3)))


def test_focal_loss_of_gaussian_target_is_not_its_own_minimum():
    c = np.array([[40.0, 40.0]])
    gt = encode_keypoints(c, BOX[None] + c[:, None], 160, 160).map.H
    peak = np.where(gt >= 1.0, 1 - 1e-6, 1e-6)
    assert focal_loss(peak, gt) < 1e-4 < focal_loss(gt, gt)


@settings(max_examples=60)
@given(arrays(float, (6, 6), elements=st.floats(0, 1)), arrays(float, (6, 6), elements=st.floats(0, 1)))
def test_focal_loss_nonnegative(pred, gt):
    assert focal_loss(pred, gt) >= 0.0


def test_focal_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    gt = rng.uniform(0, 0.9, (5, 5))
    gt[2, 2] = 1.0
    pred = rng.uniform(0.05, 0.95, (5, 5))
    g = focal_loss_grad(pred, gt)
    h = 1e-7
    for idx in np.ndindex(pred.shape):
        a, b = pred.copy(), pred.copy()
        a[idx] += h
        b[idx] -= h
        assert g[idx] == pytest.approx((focal_loss(a, gt) - focal_loss(b, gt)) / (2 * h), rel=1e-5, abs=1e-7)


def test_l1_examples():
    gt = np.zeros((4, 4, 2))
    mask = np.zeros((4, 4), bool)
    mask[2, 1] = True
    assert l1_offset_loss(gt, gt, mask) == 0.0
    pred = gt.copy()
    pred[2, 1] = (3.0, -1.0)
    assert l1_offset_loss(pred, gt, mask) == 2.0
    pred[0, 0] = (50.0, 50.0)
    assert l1_offset_loss(pred, gt, mask) == 2.0
    assert l1_offset_loss(pred, gt, np.zeros((4, 4), bool)) == 0.0
    np.testing.assert_array_equal(l1_offset_loss_grad(pred, gt, mask)[2, 1], [0.5, -0.5])
    np.testing.assert_array_equal(l1_offset_loss_grad(pred, gt, mask)[0, 0], [0.0, 0.0])


def test_map_file_round_trip_and_errors(tmp_path):
    c = np.array([[61.3, 47.9]])
    m = encode_keypoints(c, BOX[None] + c[:, None], 160, 120).map
    save_map(m, tmp_path / "m.txt")
    r = load_map(tmp_path / "m.txt")
    for name in ("H", "S", "O", "W"):
        assert np.array_equal(getattr(r, name), getattr(m, name))
    text = (tmp_path / "m.txt").read_text().splitlines()
    (tmp_path / "t.txt").write_text("\n".join(text[:-1]) + "\n")
    with pytest.raises(SceneFormatError, match="truncated"):
        load_map(tmp_path / "t.txt")
    (tmp_path / "v.txt").write_text("\n".join(["KPMAP 9 stride=4"] + text[1:]) + "\n")
    with pytest.raises(SceneFormatError, match="version"):
        load_map(tmp_path / "v.txt")

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import optimal_assignment, random_pose_cloud
from probgrasp.geometry import GripperModel, Pose
from probgrasp.matching import (
    PoseDistanceParams,
    distance_matrix,
    greedy_assign,
    nn_match,
    pose_distance,
    rotation_distance,
)


def test_distance_examples():
    p = Pose.from_rotvec([0.2, 0.1, -0.3], [0.1, 0.2, 0.3])
    assert pose_distance(p, p) == 0.0
    assert pose_distance(p, Pose(p.quat, p.trans + [0.0, 0.02, 0.0])) == pytest.approx(0.02, abs=1e-15)
    q = Pose.from_matrix(Pose.from_rotvec([0.0, 0.1, 0.0]).R @ p.R, p.trans)
    assert pose_distance(p, q, PoseDistanceParams(rho=0.05)) == pytest.approx(0.005, abs=1e-12)


def test_distance_is_symmetric_and_respects_gripper_symmetry():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = Pose.from_rotvec(rng.normal(size=3), rng.normal(size=3))
        b = Pose.from_rotvec(rng.normal(size=3), rng.normal(size=3))
        assert pose_distance(a, b) == pytest.approx(pose_distance(b, a), abs=1e-12)
        flipped = a @ GripperModel.symmetry_pose()
        assert pose_distance(a, flipped) == pytest.approx(0.0, abs=1e-12)
        assert rotation_distance(a, flipped, symmetric=False) == pytest.approx(math.pi, abs=1e-9)


def test_rho_validation():
    with pytest.raises(ValueError):
        PoseDistanceParams(rho=0.0)


def test_identical_pred_matched_at_zero():
    p = Pose.from_rotvec([0.1, 0, 0], [0, 0, 0.5])
    r = nn_match([p], [Pose(trans=[0.05, 0, 0.5]), p])
    assert r.assignments == [(0, 1, 0.0)] and r.unmatched == []


def test_empty_inputs():
    assert nn_match([], []).assignments == []
    assert nn_match([Pose()], []).unmatched == [0]
    assert nn_match([], [Pose()]).assignments == []


def test_greedy_differs_from_independent_nearest_neighbor():
    g = [Pose(trans=[0.0, 0.0, 0.5]), Pose(trans=[0.0, 0.05, 0.5])]
    p = [Pose(trans=[0.01, 0.0, 0.5]), Pose(trans=[0.02, 0.02, 0.5])]
    D = distance_matrix(p, g)
    assert list(np.argmin(D, axis=1)) == [0, 0]  # both would pick GT 0 independently
    r = nn_match(p, g, max_dist=math.inf)
    _, opt = optimal_assignment(D)
    assert sorted((a, b) for a, b, _ in r.assignments) == opt == [(0, 0), (1, 1)]


def test_gate_leaves_far_predictions_unmatched():
    g = [Pose(trans=[0.0, 0.0, 0.5])]
    p = [Pose(trans=[0.5, 0.0, 0.5]), Pose(trans=[0.01, 0.0, 0.5])]
    r = nn_match(p, g, max_dist=0.1)
    assert [(a, b) for a, b, _ in r.assignments] == [(1, 0)] and r.unmatched == [0]


def test_ties_broken_by_indices():
    D = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert [(r, c) for r, c, _ in greedy_assign(D)] == [(0, 0), (1, 1)]


def _random_instance(rng, n_p, n_g):
    gts = random_pose_cloud(rng, n_g)
    return random_pose_cloud(rng, n_p), gts


def test_permuting_gts_keeps_matched_pose_pairs():
    rng = np.random.default_rng(1)
    for _ in range(50):
        preds, gts = _random_instance(rng, 3, 4)
        perm = rng.permutation(4)
        a = nn_match(preds, gts, max_dist=math.inf)
        b = nn_match(preds, [gts[i] for i in perm], max_dist=math.inf)
        pa = {(p, id(gts[g])) for p, g, _ in a.assignments}
        pb = {(p, id(gts[perm[g]])) for p, g, _ in b.assignments}
        assert pa == pb


@settings(max_examples=50)
@given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 10_000))
def test_one_to_one(n_p, n_g, seed):
    preds, gts = _random_instance(np.random.default_rng(seed), n_p, n_g)
    r = nn_match(preds, gts, max_dist=math.inf)
    ps = [a for a, _, _ in r.assignments]
    gs = [b for _, b, _ in r.assignments]
    assert len(set(ps)) == len(ps) and len(set(gs)) == len(gs)
    assert len(r.assignments) == min(n_p, n_g)
    assert sorted(ps + r.unmatched) == list(range(n_p))


def test_rho_to_zero_uses_translation_only():
    rng = np.random.default_rng(2)
    for _ in range(30):
        preds, gts = _random_instance(rng, 3, 3)
        small = nn_match(preds, gts, PoseDistanceParams(rho=1e-12), max_dist=math.inf)
        dt = np.array([[np.linalg.norm(p.trans - g.trans) for g in gts] for p in preds])
        assert [(a, b) for a, b, _ in small.assignments] == [(a, b) for a, b, _ in greedy_assign(dt)]


def test_greedy_never_beats_oracle_and_is_exact_for_single_rows():
    rng = np.random.default_rng(3)
    for _ in range(100):
        preds, gts = _random_instance(rng, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        D = distance_matrix(preds, gts)
        best, opt = optimal_assignment(D)
        greedy = greedy_assign(D)
        assert sum(d for _, _, d in greedy) >= best - 1e-12
        if min(D.shape) == 1:
            assert sorted((a, b) for a, b, _ in greedy) == opt

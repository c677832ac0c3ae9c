import math

import numpy as np
import pytest

from probgrasp.scene import SceneConfig, sample_scene
from probgrasp.trainer import (
    KL_ONLY,
    LRSchedule,
    LossWeights,
    OptimConfig,
    ParametricPredictor,
    TrainingError,
    final_pose_errors,
    gt_keypoints,
    loss_and_grad,
    lr_schedule,
    map_predictor,
    perturb_keypoints,
    single_grasp_scene,
    softplus,
    total_loss,
    train_toy,
)


@pytest.fixture(scope="module")
def scene():
    return single_grasp_scene(sample_scene(SceneConfig(), 1000))


@pytest.fixture(scope="module")
def multi_scene():
    s = sample_scene(SceneConfig(n_objects=2), 4)
    assert len(s.grasps) >= 2
    return s


def test_loss_weights_validation():
    LossWeights(1.0, 1.0, 1.0, 0.1)  # weights used for full-pipeline training
    with pytest.raises(ValueError):
        LossWeights(0.0, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        LossWeights(-1.0, 1.0, 1.0, 1.0)


def test_lr_schedule():
    cfg = LRSchedule(1e-4, (200, 250))
    assert lr_schedule(0, cfg) == 1e-4 and lr_schedule(199, cfg) == 1e-4
    assert lr_schedule(200, cfg) == pytest.approx(1e-5, rel=1e-12)
    assert lr_schedule(300, cfg) == pytest.approx(1e-6, rel=1e-12)
    assert lr_schedule(10_000, LRSchedule(1e-4, ())) == 1e-4
    OptimConfig(lr_map=1e-4)


def test_weights_are_softplus_of_logits():
    p = ParametricPredictor.from_keypoints(np.zeros((1, 4, 2)), np.full((1, 4, 2), -50.0))
    assert np.all(p.weights > 0)
    np.testing.assert_allclose(ParametricPredictor.from_keypoints(np.zeros((1, 4, 2))).weights, 1.0, rtol=1e-12)
    assert softplus(0.0) == pytest.approx(math.log(2.0))


def test_perfect_map_predictor_has_near_zero_2d_loss(multi_scene):
    br = total_loss(map_predictor(multi_scene), multi_scene, LossWeights(1.0, 1.0, 1.0, 0.0))
    assert br.total < 1e-4 and br.kl_absent


def test_breakdown_is_consistent_with_weights(multi_scene):
    w = LossWeights(1.0, 1.0, 1.0, 0.1)
    pred = map_predictor(multi_scene, perfect=False)
    pred.map.S += 0.7
    br = total_loss(pred, multi_scene, w, OptimConfig(), 3)
    assert min(br.L_H, br.L_S, br.L_O) >= 0.0 and br.L_KL is not None
    expected = w.lambda_H * br.L_H + w.lambda_S * br.L_S + w.lambda_O * br.L_O + w.lambda_KL * br.L_KL
    assert abs(br.total - expected) <= 1e-12
    assert br.matched == len(multi_scene.grasps)


def test_unmatched_kl_is_absent_not_zero(scene):
    kp = perturb_keypoints(gt_keypoints(scene), 30.0, np.random.default_rng(0))
    br = total_loss(ParametricPredictor.from_keypoints(kp), scene, KL_ONLY, OptimConfig(max_match_dist=1e-9))
    assert br.kl_absent and br.L_KL is None and br.matched == 0


def test_no_grasps_is_an_error(scene):
    from dataclasses import replace

    empty = replace(scene, grasps=[])
    with pytest.raises(TrainingError, match="no grasps"):
        total_loss(ParametricPredictor.from_keypoints(np.zeros((0, 4, 2))), empty, KL_ONLY)
    with pytest.raises(TrainingError):
        train_toy([], KL_ONLY, OptimConfig())


def test_exact_init_loss_change_within_mc_noise(scene):
    # growing weights keeps sharpening the density, so logits are frozen to isolate the keypoints
    opt = OptimConfig(iters=10, lr_logit=0.0)
    noise = [total_loss(ParametricPredictor.from_keypoints(gt_keypoints(scene)), scene, KL_ONLY, opt, s).total
             for s in range(8)]
    rep = train_toy([scene], KL_ONLY, opt, 0)
    assert abs(rep.history[-1]["total"] - rep.history[0]["total"]) <= max(noise) - min(noise)


def test_exact_keypoints_are_not_stationary_for_kl(scene):
    p = ParametricPredictor.from_keypoints(gt_keypoints(scene))
    g = np.array([loss_and_grad(p, scene, KL_ONLY, OptimConfig(), np.random.default_rng(s))[1].keypoints[0]
                  for s in range(40)])
    z = np.abs(g.mean(axis=0)) / (g.std(axis=0) / np.sqrt(len(g)))
    assert z.max() > 5.0


@pytest.mark.xfail(strict=True, reason="exact keypoints are not a stationary point of the KL loss at finite confidence")
def test_exact_init_pose_error_stays_below_1mm(scene):
    opt = OptimConfig(iters=10)
    (err,) = final_pose_errors(train_toy([scene], KL_ONLY, opt, 0).predictors[0], scene, opt)
    assert err[0] < 0.1 and err[1] < 0.1


def test_descent_with_fixed_mc_seed(scene):
    kp = perturb_keypoints(gt_keypoints(scene), 8.0, np.random.default_rng(0))
    opt = OptimConfig(iters=30, lr_px=1e-2, lr_logit=1e-2, fixed_mc_seed=True)
    rep = train_toy([scene], KL_ONLY, opt, 0, [ParametricPredictor.from_keypoints(kp)])
    totals = [h["total"] for h in rep.history]
    assert all(b <= a + 1e-9 for a, b in zip(totals, totals[1:]))


def test_training_is_deterministic(scene):
    kp = perturb_keypoints(gt_keypoints(scene), 8.0, np.random.default_rng(1))
    opt = OptimConfig(iters=15)
    a = train_toy([scene], KL_ONLY, opt, 5, [ParametricPredictor.from_keypoints(kp)])
    b = train_toy([scene], KL_ONLY, opt, 5, [ParametricPredictor.from_keypoints(kp)])
    assert a.history == b.history
    assert np.array_equal(a.predictors[0].keypoints, b.predictors[0].keypoints)


def test_kl_training_reduces_pose_error(scene):
    kp = perturb_keypoints(gt_keypoints(scene), 8.0, np.random.default_rng(2))
    pred = ParametricPredictor.from_keypoints(kp)
    (before,) = final_pose_errors(pred, scene)
    rep = train_toy([scene], KL_ONLY, OptimConfig(iters=150), 0, [pred])
    (after,) = final_pose_errors(rep.predictors[0], scene)
    assert after[0] <= before[0] / 10.0 and after[0] <= 1.0 and after[1] <= 10.0


def test_divergence_returns_last_finite_state(scene):
    kp = perturb_keypoints(gt_keypoints(scene), 8.0, np.random.default_rng(0))
    rep = train_toy([scene], KL_ONLY, OptimConfig(iters=20, lr_px=1e9), 0, [ParametricPredictor.from_keypoints(kp)])
    assert rep.diverged and "non-finite" in rep.message
    assert np.all(np.isfinite(rep.predictors[0].keypoints)) and np.all(np.isfinite(rep.predictors[0].logits))


def test_log_csv_columns(scene, tmp_path):
    rep = train_toy([scene], KL_ONLY, OptimConfig(iters=2), 0)
    rep.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iter,L_H,L_S,L_O,L_KL,total,median_pose_err_cm,median_pose_err_deg"
    assert len(lines) == 4

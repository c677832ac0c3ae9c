"""Desk-scale end-to-end training with free 2D parameters in place of a CNN.

Each scene gets per-grasp learnable keypoints and confidence logits
(``weights = softplus(logits)``).  The 3D loss flows through the
probabilistic PnP layer: predictions are solved to their density mode,
matched to ground truth by :func:`~probgrasp.matching.nn_match`, and the KL
gradient is pushed back to pixels and logits.  An optional map pathway keeps
learnable ``H``/``S``/``O`` grids, reads the keypoints at the ground-truth
center cells, and adds the 2D map losses.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .geometry import GripperModel, project
from .keypoint_codec import (
    FOCAL_EPS,
    EncodeResult,
    encode_grasps,
    focal_loss,
    focal_loss_grad,
    l1_offset_loss,
    l1_offset_loss_grad,
)
from .matching import PoseDistanceParams, distance_components, nn_match
from .pnp import CorrespondenceSet, PnPError, SolverConfig
from .prob_pnp import MCConfig, ProbPnPError, amis_sample, find_mode, grad_from_samples, l_pred
from .pnp import weighted_cost
from .scene import Scene

log = logging.getLogger(__name__)

LOGIT_ONE = math.log(math.e - 1.0)  # softplus(LOGIT_ONE) == 1


def softplus(x):
    return np.logaddexp(0.0, x)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_H: float = 1.0
    lambda_S: float = 1.0
    lambda_O: float = 1.0
    lambda_KL: float = 0.1

    def __post_init__(self):
        vals = (self.lambda_H, self.lambda_S, self.lambda_O, self.lambda_KL)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


KL_ONLY = LossWeights(0.0, 0.0, 0.0, 1.0)


@dataclass(frozen=True)
class LRSchedule:
    base_lr: float = 1e-4
    milestones: tuple = ()
    gamma: float = 0.1


def lr_schedule(step: int, cfg: LRSchedule) -> float:
    """Piecewise-constant decay by ``gamma`` at every milestone already passed."""
    if step < 0:
        raise ValueError("step must be >= 0")
    passed = sum(1 for m in cfg.milestones if step >= m)
    return cfg.base_lr * cfg.gamma**passed


@dataclass(frozen=True)
class OptimConfig:
    iters: int = 500
    lr_px: float = 0.1
    lr_logit: float = 0.01
    lr_map: float = 1e-4  # CNN-like pathway (H logits)
    momentum: float = 0.9
    milestones: tuple = ()
    fixed_mc_seed: bool = False
    freeze_keypoints: bool = False
    mc: MCConfig = field(default_factory=lambda: MCConfig(rounds=4, k_per_round=64))
    solver: SolverConfig = field(default_factory=SolverConfig)
    match: PoseDistanceParams = field(default_factory=PoseDistanceParams)
    max_match_dist: float = math.inf  # training gate; every prediction gets its nearest GT
    precondition_px: bool = True
    clip_logit_grad: float = 1.0
    branch_check_every: int = 5  # iterations between full branch checks of tracked modes
    log_every: int = 0

    def factor(self, step: int) -> float:
        return lr_schedule(step, LRSchedule(1.0, self.milestones))


@dataclass(eq=False)
class MapParams:
    """Learnable map grids; ``H = sigmoid(h_logit)``."""

    h_logit: np.ndarray
    S: np.ndarray
    O: np.ndarray
    stride: int
    cells: list  # (u, v) read-out cell per grasp

    @property
    def H(self) -> np.ndarray:
        return expit(self.h_logit)

    def keypoints(self) -> np.ndarray:
        out = np.empty((len(self.cells), 4, 2))
        for j, (u, v) in enumerate(self.cells):
            out[j] = np.array([u, v], dtype=float) * self.stride + self.S[v, u] + self.O[v, u]
        return out

    def copy(self) -> "MapParams":
        return MapParams(self.h_logit.copy(), self.S.copy(), self.O.copy(), self.stride, list(self.cells))


@dataclass(eq=False)
class ParametricPredictor:
    keypoints: np.ndarray  # (G, 4, 2) pixels
    logits: np.ndarray  # (G, 4, 2)
    map: MapParams | None = None

    @property
    def weights(self) -> np.ndarray:
        return softplus(self.logits)

    def predicted_keypoints(self) -> np.ndarray:
        return self.map.keypoints() if self.map is not None else self.keypoints

    def copy(self) -> "ParametricPredictor":
        return ParametricPredictor(self.keypoints.copy(), self.logits.copy(), None if self.map is None else self.map.copy())

    def correspondences(self, scene: Scene, g: GripperModel = GripperModel()) -> list[CorrespondenceSet]:
        kps, w = self.predicted_keypoints(), self.weights
        return [CorrespondenceSet(kps[j], g.corners.copy(), w[j], scene.intrinsics) for j in range(len(kps))]

    @classmethod
    def from_keypoints(cls, keypoints, logits=None) -> "ParametricPredictor":
        kp = np.array(keypoints, dtype=float)
        lg = np.full(kp.shape, LOGIT_ONE) if logits is None else np.array(logits, dtype=float)
        return cls(kp, lg)


def gt_keypoints(scene: Scene, g: GripperModel = GripperModel()) -> np.ndarray:
    return np.array([project(scene.intrinsics, scene.grasp_in_camera(i).apply(g.corners)) for i in range(len(scene.grasps))])


def gt_map(scene: Scene, g: GripperModel = GripperModel(), stride: int = 4) -> EncodeResult:
    return encode_grasps([scene.grasp_in_camera(i) for i in range(len(scene.grasps))], scene.intrinsics, g, stride)


def map_predictor(scene: Scene, g: GripperModel = GripperModel(), stride: int = 4, perfect: bool = True) -> ParametricPredictor:
    """Predictor on the map pathway, initialized at the 2D-loss optimum.

    The heatmap is set to the clamped peak indicator, which is the minimizer
    of the penalty-reduced focal loss (a Gaussian-splat prediction is not).
    """
    enc = gt_map(scene, g, stride)
    m = enc.map
    peaks = m.peak_mask()
    h = np.where(peaks, 1.0 - FOCAL_EPS, FOCAL_EPS) if perfect else np.full(m.H.shape, 0.1)
    cells = [c for c in enc.cells if c is not None]
    if len(cells) != len(scene.grasps):
        raise TrainingError("every grasp center must fall inside the image for the map pathway")
    mp = MapParams(np.log(h) - np.log1p(-h), m.S.copy(), m.O.copy(), stride, cells)
    n = len(cells)
    return ParametricPredictor(mp.keypoints(), np.full((n, 4, 2), LOGIT_ONE), mp)


@dataclass
class LossBreakdown:
    L_H: float = 0.0
    L_S: float = 0.0
    L_O: float = 0.0
    L_KL: float | None = None  # None when no prediction matched a GT grasp
    total: float = 0.0
    matched: int = 0
    pose_err_cm: list = field(default_factory=list)
    pose_err_deg: list = field(default_factory=list)

    @property
    def kl_absent(self) -> bool:
        return self.L_KL is None


@dataclass
class Gradients:
    keypoints: np.ndarray
    logits: np.ndarray
    h_logit: np.ndarray | None = None
    S: np.ndarray | None = None
    O: np.ndarray | None = None


def _kl_terms(pred: ParametricPredictor, scene: Scene, opt: OptimConfig, rng, inits, g: GripperModel, branches: bool = True):
    """KL loss, its gradient w.r.t. keypoints / weights, and per-grasp modes."""
    Xs = pred.correspondences(scene, g)
    n = len(Xs)
    gts = [scene.grasp_in_camera(i) for i in range(len(scene.grasps))]
    seeds = np.random.default_rng(rng).integers(2**63, size=2)
    mode_rng = np.random.default_rng(int(seeds[0]))
    modes = []
    for j, X in enumerate(Xs):
        try:
            modes.append(find_mode(X, opt.solver, mode_rng, inits[j] if inits else None, branches))
        except PnPError:
            modes.append(None)
    ok = [j for j in range(n) if modes[j] is not None]
    match = nn_match([modes[j].pose for j in ok], gts, opt.match, opt.max_match_dist)
    targets = {ok[p]: gi for p, gi, _ in match.assignments}
    d_kp = np.zeros((n, 4, 2))
    d_w = np.zeros((n, 4, 2))
    total, matched = 0.0, 0
    for j in sorted(targets):
        grng = np.random.default_rng([int(seeds[1]), j])
        try:
            s = amis_sample(Xs[j], modes[j], opt.mc, grng)
            lp = l_pred(s)
        except ProbPnPError:
            continue
        tgt = gts[targets[j]]
        total += lp + weighted_cost(Xs[j], tgt)
        a, b = grad_from_samples(Xs[j], tgt, s)
        d_kp[j], d_w[j] = a, b
        matched += 1
    return (total if matched else None), d_kp, d_w, modes, matched


def loss_and_grad(
    pred: ParametricPredictor,
    scene: Scene,
    w: LossWeights,
    opt: OptimConfig,
    rng,
    inits=None,
    g: GripperModel = GripperModel(),
    targets: EncodeResult | None = None,
    branches: bool = True,
):
    """Total loss breakdown, gradients, and per-grasp mode reports."""
    br = LossBreakdown()
    grads = Gradients(np.zeros_like(pred.keypoints), np.zeros_like(pred.logits))
    if not scene.grasps:
        raise TrainingError("scene has no grasps")
    if pred.map is not None:
        enc = targets or gt_map(scene, g, pred.map.stride)
        m, mask = enc.map, enc.map.peak_mask()
        H = pred.map.H
        br.L_H = focal_loss(H, m.H)
        br.L_S = l1_offset_loss(pred.map.S, m.S, mask)
        br.L_O = l1_offset_loss(pred.map.O, m.O, mask)
        grads.h_logit = w.lambda_H * focal_loss_grad(H, m.H) * H * (1.0 - H)
        grads.S = w.lambda_S * l1_offset_loss_grad(pred.map.S, m.S, mask)
        grads.O = w.lambda_O * l1_offset_loss_grad(pred.map.O, m.O, mask)
    modes = [None] * len(pred.keypoints)
    if w.lambda_KL > 0:
        kl, d_kp, d_w, modes, matched = _kl_terms(pred, scene, opt, rng, inits, g, branches)
        br.L_KL, br.matched = kl, matched
        grads.keypoints = w.lambda_KL * d_kp
        grads.logits = w.lambda_KL * d_w * expit(pred.logits)  # d softplus = sigmoid
        if pred.map is not None:
            for j, (u, v) in enumerate(pred.map.cells):
                grads.S[v, u] += grads.keypoints[j].sum(axis=0)
                grads.O[v, u] += grads.keypoints[j]
    br.total = w.lambda_H * br.L_H + w.lambda_S * br.L_S + w.lambda_O * br.L_O + (
        w.lambda_KL * br.L_KL if br.L_KL is not None else 0.0)
    gts = [scene.grasp_in_camera(i) for i in range(len(scene.grasps))]
    for rep in modes:
        if rep is None:
            continue
        dt, ang = distance_components([rep.pose], gts, opt.match.symmetric)
        k = int(np.argmin(dt[0] + opt.match.rho * ang[0]))
        br.pose_err_cm.append(100.0 * float(dt[0, k]))
        br.pose_err_deg.append(float(np.degrees(ang[0, k])))
    return br, grads, modes


def total_loss(pred: ParametricPredictor, scene: Scene, w: LossWeights, opt: OptimConfig = OptimConfig(), rng=0) -> LossBreakdown:
    return loss_and_grad(pred, scene, w, opt, rng)[0]


@dataclass
class TrainingReport:
    history: list = field(default_factory=list)  # one dict per iteration
    predictors: list = field(default_factory=list)
    diverged: bool = False
    message: str = ""

    COLUMNS = ("iter", "L_H", "L_S", "L_O", "L_KL", "total", "median_pose_err_cm", "median_pose_err_deg")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(self.COLUMNS)
            for row in self.history:
                wr.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c] for c in self.COLUMNS])


def _iteration_rng(seed: int, it: int, fixed: bool) -> int:
    return int(np.random.default_rng([seed, 0 if fixed else it + 1]).integers(2**63))


def train_toy(
    scenes: list,
    w: LossWeights,
    opt: OptimConfig,
    rng=0,
    predictors: list | None = None,
    g: GripperModel = GripperModel(),
) -> TrainingReport:
    """Momentum gradient descent on per-scene predictors.

    ``predictors`` defaults to exact ground-truth keypoints with unit weights.
    Scenes are processed in list order and each keeps its own momentum
    buffers, so results are independent of any parallel scheduling.
    """
    if not scenes:
        raise TrainingError("no scenes to train on")
    seed = int(rng) if isinstance(rng, (int, np.integer)) else int(rng.integers(2**63))
    preds = [p.copy() for p in predictors] if predictors else [ParametricPredictor.from_keypoints(gt_keypoints(s, g)) for s in scenes]
    if len(preds) != len(scenes):
        raise TrainingError("one predictor per scene is required")
    targets = [gt_map(s, g, p.map.stride) if p.map is not None else None for s, p in zip(scenes, preds)]
    vel = [Gradients(np.zeros_like(p.keypoints), np.zeros_like(p.logits),
                     *(None,) * 3 if p.map is None else (np.zeros_like(p.map.h_logit), np.zeros_like(p.map.S), np.zeros_like(p.map.O)))
           for p in preds]
    inits = [None] * len(scenes)
    report = TrainingReport()
    last_good = [p.copy() for p in preds]
    for it in range(opt.iters + 1):
        it_seed = _iteration_rng(seed, it, opt.fixed_mc_seed)
        rows, grads = [], []
        for si, (scene, p) in enumerate(zip(scenes, preds)):
            check = opt.branch_check_every <= 1 or it % opt.branch_check_every == 0
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is detected below
                br, gr, modes = loss_and_grad(p, scene, w, opt, np.random.default_rng([it_seed, si]), inits[si], g, targets[si], check)
            rows.append(br)
            grads.append(gr)
            inits[si] = [m.pose if m is not None else None for m in modes]
        row = _summarize(it, rows)
        report.history.append(row)
        if opt.log_every and it % opt.log_every == 0:
            log.info("iter %d total %.6g pose err %.3g cm / %.3g deg", it, row["total"], row["median_pose_err_cm"], row["median_pose_err_deg"])
        if not math.isfinite(row["total"]) or any(not np.all(np.isfinite(gr.keypoints)) or not np.all(np.isfinite(gr.logits)) for gr in grads):
            report.diverged = True
            report.message = f"non-finite loss or gradient at iteration {it}; returning last finite state"
            log.error(report.message)
            preds = last_good
            break
        last_good = [p.copy() for p in preds]
        if it == opt.iters:
            break
        f = opt.factor(it)
        for p, gr, v in zip(preds, grads, vel):
            _step(p, gr, v, opt, f)
    report.predictors = preds
    return report


def _step(p: ParametricPredictor, gr: Gradients, v: Gradients, opt: OptimConfig, f: float) -> None:
    """One momentum update.

    The pixel-group gradient of the KL term scales with ``w**2``; with
    ``precondition_px`` it is divided by the current squared weights so the
    pixel step no longer depends on the confidence scale.  Logit gradients are
    clipped elementwise.
    """
    mu = opt.momentum
    if opt.precondition_px:
        w2 = np.maximum(p.weights**2, 1e-12)
        gr = replace(gr, keypoints=gr.keypoints / w2)
        if p.map is not None:
            for j, (u, vv) in enumerate(p.map.cells):
                gr.S[vv, u] = gr.S[vv, u] / w2[j].mean(axis=0)
                gr.O[vv, u] = gr.O[vv, u] / w2[j]
    if opt.clip_logit_grad > 0:
        gr = replace(gr, logits=np.clip(gr.logits, -opt.clip_logit_grad, opt.clip_logit_grad))
    if p.map is None:
        if not opt.freeze_keypoints:
            v.keypoints = mu * v.keypoints - opt.lr_px * f * gr.keypoints
            p.keypoints = p.keypoints + v.keypoints
    else:
        v.h_logit = mu * v.h_logit - opt.lr_map * f * gr.h_logit
        p.map.h_logit = p.map.h_logit + v.h_logit
        if not opt.freeze_keypoints:
            v.S = mu * v.S - opt.lr_px * f * gr.S
            v.O = mu * v.O - opt.lr_px * f * gr.O
            p.map.S = p.map.S + v.S
            p.map.O = p.map.O + v.O
        p.keypoints = p.map.keypoints()
    v.logits = mu * v.logits - opt.lr_logit * f * gr.logits
    p.logits = p.logits + v.logits


def _summarize(it: int, rows: list[LossBreakdown]) -> dict:
    kl = [r.L_KL for r in rows if r.L_KL is not None]
    cm = [e for r in rows for e in r.pose_err_cm]
    deg = [e for r in rows for e in r.pose_err_deg]
    return {
        "iter": it,
        "L_H": float(sum(r.L_H for r in rows)),
        "L_S": float(sum(r.L_S for r in rows)),
        "L_O": float(sum(r.L_O for r in rows)),
        "L_KL": float(sum(kl)) if kl else None,
        "total": float(sum(r.total for r in rows)),
        "median_pose_err_cm": float(np.median(cm)) if cm else math.nan,
        "median_pose_err_deg": float(np.median(deg)) if deg else math.nan,
    }


def perturb_keypoints(kp: np.ndarray, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """Shift every keypoint by exactly ``magnitude`` px in a uniformly random direction."""
    ang = rng.uniform(0.0, 2.0 * math.pi, kp.shape[:-1])
    return kp + magnitude * np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def final_pose_errors(pred: ParametricPredictor, scene: Scene, opt: OptimConfig = OptimConfig(), rng=0, g: GripperModel = GripperModel()):
    """Multi-start solve of each predicted grasp; (cm, deg) error to the nearest GT, None if unsolvable."""
    from .pnp import multi_start_solve

    gts = [scene.grasp_in_camera(i) for i in range(len(scene.grasps))]
    out = []
    for X in pred.correspondences(scene, g):
        try:
            rep = multi_start_solve(X, opt.solver, np.random.default_rng(rng))
        except PnPError:
            out.append(None)
            continue
        dt, ang = distance_components([rep.pose], gts, opt.match.symmetric)
        k = int(np.argmin(dt[0] + opt.match.rho * ang[0]))
        out.append((100.0 * float(dt[0, k]), float(np.degrees(ang[0, k]))))
    return out


def single_grasp_scene(scene: Scene, index: int = 0) -> Scene:
    return replace(scene, grasps=[scene.grasps[index]])

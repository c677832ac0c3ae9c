"""Finite-difference verification of the KL gradient on random problems."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose, project, random_rotation, so3_exp
from .pnp import CorrespondenceSet, SolverConfig
from .prob_pnp import MCConfig, grad_from_samples, kl_loss, loss_from_samples

NOISE_LEVELS_PX = (0.0, 0.5, 2.0, 5.0)


@dataclass
class GradcheckResult:
    rel_errors: np.ndarray  # one entry per checked coordinate
    abs_errors: np.ndarray
    trials: int
    trial_index: np.ndarray | None = None
    analytic: np.ndarray | None = None
    numeric: np.ndarray | None = None

    @property
    def max_rel(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    def fraction_below(self, tol: float) -> float:
        return float(np.mean(self.rel_errors < tol)) if self.rel_errors.size else 1.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "analytic", "numeric", "rel_error"])
            for row in zip(self.trial_index, self.analytic, self.numeric, self.rel_errors):
                w.writerow([int(row[0]), *(repr(float(v)) for v in row[1:])])


def random_problem(rng: np.random.Generator, k: CameraIntrinsics = CameraIntrinsics()):
    """Random correspondences (4-12 points, mixed pixel noise, random weights) and a nearby target pose."""
    n = int(rng.integers(4, 13))
    pts = rng.uniform(-0.05, 0.05, (n, 3))
    R = random_rotation(rng)
    t = np.array([rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(0.3, 0.8)])
    gt = Pose.from_matrix(R, t)
    sigma = NOISE_LEVELS_PX[int(rng.integers(len(NOISE_LEVELS_PX)))]
    p2d = project(k, gt.apply(pts)) + rng.normal(0.0, sigma, (n, 2))
    w = rng.uniform(0.3, 2.0, (n, 2))
    target = Pose.from_matrix(so3_exp(rng.normal(0.0, 0.01, 3)) @ R, t + rng.normal(0.0, 0.002, 3))
    return CorrespondenceSet(p2d, pts, w, k), target


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_problem(X: CorrespondenceSet, target: Pose, mc: MCConfig, rng, h: float = 1e-5,
                  solver_cfg: SolverConfig = SolverConfig()):
    """Analytic vs central-difference gradient with the sample set frozen (common random numbers)."""
    res = kl_loss([(X, target)], mc, rng, solver_cfg)
    s = res.per_grasp[0].samples
    d_p, d_w = grad_from_samples(X, target, s)
    num_p, num_w = np.zeros_like(d_p), np.zeros_like(d_w)
    for name, num in (("p2d", num_p), ("w2d", num_w)):
        base = getattr(X, name)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            lp = loss_from_samples([(X.replace(**{name: plus}), target)], [s])
            lm = loss_from_samples([(X.replace(**{name: minus}), target)], [s])
            num[idx] = (lp - lm) / (2.0 * h)
    a = np.concatenate([d_p.ravel(), d_w.ravel()])
    n = np.concatenate([num_p.ravel(), num_w.ravel()])
    return a, n


def run_gradcheck(trials: int = 100, seed: int = 0, mc: MCConfig = MCConfig(), h: float = 1e-5) -> GradcheckResult:
    idx, an, nu = [], [], []
    for i in range(trials):
        rng = np.random.default_rng([seed, i])
        X, target = random_problem(rng)
        a, n = check_problem(X, target, mc, rng, h)
        idx.append(np.full(a.size, i))
        an.append(a)
        nu.append(n)
    if not an:
        return GradcheckResult(np.zeros(0), np.zeros(0), 0, np.zeros(0, int), np.zeros(0), np.zeros(0))
    a, n = np.concatenate(an), np.concatenate(nu)
    return GradcheckResult(relative_error(a, n), np.abs(a - n), trials, np.concatenate(idx), a, n)

"""Probabilistic PnP layer.

The pose density is ``p(y | X) ∝ exp(-cost(X, y))`` with ``cost`` the
confidence-weighted reprojection cost.  Its log-normalizer ``l_pred`` is
estimated with adaptive multiple importance sampling (AMIS): a few rounds of
multivariate Student-t proposals in a tangent chart around the mode, each
round refit from all weighted samples so far, with every sample weighted
against the deterministic mixture of all proposals.

The training loss for one prediction matched to a ground-truth pose ``y_gt``
is ``l_pred + cost(X, y_gt)`` (Dirac target, constants dropped).  Its
gradient with respect to the 2D keypoints and confidences is

    d cost(X, y_gt) - E_{p(y|X)}[ d cost(X, y) ]

where the expectation is the self-normalized importance-weighted average
over the same sample set that produced the loss value.  With the sample set
held fixed this is the exact derivative of the Monte Carlo loss estimate,
which is what :func:`loss_from_samples` evaluates for finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .geometry import (
    Pose,
    haar_log_density_batch,
    local_batch,
    quat_from_matrix_batch,
    retract_batch,
    so3_exp_batch,
)
from .pnp import (
    BEHIND_CAMERA_PENALTY,
    CorrespondenceSet,
    PnPError,
    SolveReport,
    SolverConfig,
    gauss_newton_hessian,
    multi_start_solve,
    residuals_batch,
    solve_pnp,
    weak_perspective_starts,
    weighted_cost,
)


class ProbPnPError(RuntimeError):
    pass


@dataclass(frozen=True)
class MCConfig:
    rounds: int = 4
    k_per_round: int = 128
    dof: float = 3.0
    rot_floor: float = 1e-3
    trans_floor: float = 1e-4
    fallback_rot: float = 0.1
    fallback_trans: float = 0.01

    @property
    def total_samples(self) -> int:
        return self.rounds * self.k_per_round


# --------------------------------------------------------------------------
# charts
# --------------------------------------------------------------------------


class SE3Chart:
    """Product chart ``(phi, rho)`` on SO(3) x R^3; densities w.r.t. Haar x Lebesgue."""

    dim = 6
    basis = None

    def floors(self, cfg: MCConfig) -> np.ndarray:
        return np.array([cfg.rot_floor] * 3 + [cfg.trans_floor] * 3)

    def fallback(self, cfg: MCConfig) -> np.ndarray:
        return np.array([cfg.fallback_rot] * 3 + [cfg.fallback_trans] * 3)

    def retract(self, center: Pose, deltas: np.ndarray):
        return retract_batch(center, deltas)

    def local(self, center: Pose, R: np.ndarray, t: np.ndarray) -> np.ndarray:
        return local_batch(center, R, t)

    def log_jacobian(self, deltas: np.ndarray) -> np.ndarray:
        return haar_log_density_batch(deltas[:, :3])


class PlanarChart:
    """Reduced pose ``(theta, x, y)``: rotation about the optical axis, translation at fixed depth.

    Densities are w.r.t. ``dtheta dx dy``.
    """

    dim = 3
    basis = np.zeros((6, 3))
    basis[2, 0] = basis[3, 1] = basis[4, 2] = 1.0

    def floors(self, cfg: MCConfig) -> np.ndarray:
        return np.array([cfg.rot_floor, cfg.trans_floor, cfg.trans_floor])

    def fallback(self, cfg: MCConfig) -> np.ndarray:
        return np.array([cfg.fallback_rot, cfg.fallback_trans, cfg.fallback_trans])

    def retract(self, center: Pose, deltas: np.ndarray):
        phi = np.zeros((len(deltas), 3))
        phi[:, 2] = deltas[:, 0]
        R = so3_exp_batch(phi) @ center.R
        t = np.repeat(center.trans[None], len(deltas), axis=0)
        t[:, :2] += deltas[:, 1:]
        return R, t

    def local(self, center: Pose, R: np.ndarray, t: np.ndarray) -> np.ndarray:
        M = R @ center.R.T
        theta = np.arctan2(M[:, 1, 0], M[:, 0, 0])
        return np.column_stack([theta, t[:, 0] - center.trans[0], t[:, 1] - center.trans[1]])

    def log_jacobian(self, deltas: np.ndarray) -> np.ndarray:
        return np.zeros(len(deltas))


def planar_pose(theta: float, x: float, y: float, z0: float) -> Pose:
    c, s = math.cos(theta), math.sin(theta)
    return Pose.from_matrix([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], [x, y, z0])


# --------------------------------------------------------------------------
# proposals and sample sets
# --------------------------------------------------------------------------


@dataclass
class ProposalDistribution:
    """Multivariate Student-t in chart coordinates around ``center``."""

    center: Pose
    scale: np.ndarray
    dof: float

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=float)
        self._chol = np.linalg.cholesky(self.scale)
        d = len(self.scale)
        self._log_norm = (
            gammaln(0.5 * (self.dof + d))
            - gammaln(0.5 * self.dof)
            - 0.5 * d * math.log(self.dof * math.pi)
            - float(np.sum(np.log(np.diag(self._chol))))
        )

    @property
    def rotation_scale(self) -> np.ndarray:
        return np.sqrt(np.diag(self.scale))[: len(self.scale) // 2]

    @property
    def translation_scale(self) -> np.ndarray:
        return np.sqrt(np.diag(self.scale))[len(self.scale) // 2:]

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        d = len(self.scale)
        z = rng.standard_normal((n, d))
        g = rng.chisquare(self.dof, n)
        return (z @ self._chol.T) / np.sqrt(g / self.dof)[:, None]

    def log_pdf_local(self, deltas: np.ndarray) -> np.ndarray:
        d = len(self.scale)
        sol = np.linalg.solve(self._chol, deltas.T)
        maha = np.sum(sol * sol, axis=0)
        return self._log_norm - 0.5 * (self.dof + d) * np.log1p(maha / self.dof)


@dataclass
class MCSampleSet:
    """Importance samples of the pose density.

    ``log_weight = loglik - log_mix`` where ``loglik = -cost`` and ``log_mix``
    is the log density of the equal-weight mixture of all proposals.
    """

    rotations: np.ndarray
    translations: np.ndarray
    log_mix: np.ndarray
    loglik: np.ndarray
    proposals: list = field(default_factory=list)

    @property
    def log_weights(self) -> np.ndarray:
        return self.loglik - self.log_mix

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def __len__(self):
        return len(self.loglik)

    def normalized_weights(self) -> np.ndarray:
        lw = self.log_weights
        return np.exp(lw - logsumexp(lw))

    def effective_sample_size(self) -> float:
        v = self.normalized_weights()
        return float(1.0 / np.sum(v * v))

    def poses(self) -> list[Pose]:
        q = quat_from_matrix_batch(self.rotations)
        return [Pose(a, b) for a, b in zip(q, self.translations)]

    def reweighted(self, X: CorrespondenceSet) -> "MCSampleSet":
        """Same samples and proposal densities, likelihood re-evaluated for ``X``."""
        return MCSampleSet(self.rotations, self.translations, self.log_mix,
                           -_costs(X, self.rotations, self.translations), self.proposals)


def _costs(X: CorrespondenceSet, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    r = X.w2d * residuals_batch(X, R, t)
    return 0.5 * np.sum(r * r, axis=(1, 2))


def log_likelihood(X: CorrespondenceSet, y: Pose) -> float:
    return -weighted_cost(X, y)


def _floored(scale: np.ndarray, floors: np.ndarray) -> np.ndarray:
    # scales rows/columns so each marginal reaches its floor; correlations kept
    sd = np.sqrt(np.maximum(np.diag(scale), 0.0))
    f = np.where(sd > 0, np.maximum(1.0, floors / np.where(sd > 0, sd, 1.0)), 1.0)
    out = scale * np.outer(f, f)
    dead = sd <= 0
    if np.any(dead):
        out[dead, :] = 0.0
        out[:, dead] = 0.0
        out[dead, dead] = floors[dead] ** 2
    return 0.5 * (out + out.T)


def _is_valid_scale(S: np.ndarray) -> bool:
    if not np.all(np.isfinite(S)):
        return False
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return False
    return True


def laplace_scale(X: CorrespondenceSet, mode: Pose, cfg: MCConfig, chart=None) -> np.ndarray:
    """Inverse Gauss-Newton Hessian at the mode with per-axis floors, or the fixed fallback."""
    chart = chart or SE3Chart()
    H = gauss_newton_hessian(X, mode, chart.basis)
    floors = chart.floors(cfg)
    try:
        cov = np.linalg.inv(H)
        ok = np.all(np.isfinite(cov)) and np.linalg.cond(H) < 1e14 and np.all(np.diag(cov) > 0)
    except np.linalg.LinAlgError:
        ok = False
    if ok:
        cov = _floored(0.5 * (cov + cov.T), floors)
        ok = _is_valid_scale(cov)
    if not ok:
        cov = np.diag(chart.fallback(cfg) ** 2)
    return cov


def amis_sample(
    X: CorrespondenceSet,
    mode: SolveReport,
    cfg: MCConfig = MCConfig(),
    rng: np.random.Generator | None = None,
    chart=None,
) -> MCSampleSet:
    if not mode.converged:
        raise ProbPnPError("mode solve did not converge")
    rng = np.random.default_rng(0) if rng is None else rng
    chart = chart or SE3Chart()
    floors = chart.floors(cfg)
    proposal = ProposalDistribution(mode.pose, laplace_scale(X, mode.pose, cfg, chart), cfg.dof)
    proposals: list[ProposalDistribution] = []
    Rs, ts, logliks = [], [], []
    log_q = np.empty((0, 0))  # (samples so far, proposals so far)
    for rnd in range(cfg.rounds):
        proposals.append(proposal)
        deltas = proposal.draw(rng, cfg.k_per_round)
        R, t = chart.retract(proposal.center, deltas)
        Rs.append(R)
        ts.append(t)
        logliks.append(-_costs(X, R, t))
        R_all, t_all = np.concatenate(Rs), np.concatenate(ts)
        new_rows = np.stack([_log_q(p, chart, R, t) for p in proposals], axis=1)
        new_col = _log_q(proposal, chart, R_all[: len(log_q)], t_all[: len(log_q)])
        log_q = np.vstack([np.column_stack([log_q, new_col]), new_rows])
        log_mix = logsumexp(log_q, axis=1) - math.log(len(proposals))
        loglik = np.concatenate(logliks)
        if rnd < cfg.rounds - 1:
            proposal = _refit(proposal, chart, R_all, t_all, loglik - log_mix, floors, cfg)
    return MCSampleSet(np.concatenate(Rs), np.concatenate(ts), log_mix, np.concatenate(logliks), proposals)


def _log_q(prop: ProposalDistribution, chart, R, t) -> np.ndarray:
    if len(R) == 0:
        return np.empty(0)
    deltas = chart.local(prop.center, R, t)
    return prop.log_pdf_local(deltas) - chart.log_jacobian(deltas)


def _refit(prev: ProposalDistribution, chart, R, t, log_w, floors, cfg: MCConfig) -> ProposalDistribution:
    finite = np.isfinite(log_w)
    if not np.any(finite):
        return prev
    v = np.exp(log_w - logsumexp(log_w[finite]))
    v[~finite] = 0.0
    ess = 1.0 / np.sum(v * v)
    deltas = chart.local(prev.center, R, t)
    mu = v @ deltas
    center = _shift(prev.center, mu, chart)
    if ess < 2 * chart.dim:
        return ProposalDistribution(center, prev.scale, cfg.dof)
    dc = chart.local(center, R, t)
    m2 = v @ dc
    cov = (dc - m2).T @ ((dc - m2) * v[:, None])
    cov = _floored(0.5 * (cov + cov.T), floors)
    if not _is_valid_scale(cov):
        cov = prev.scale
    return ProposalDistribution(center, cov, cfg.dof)


def _shift(center: Pose, mu: np.ndarray, chart) -> Pose:
    R, t = chart.retract(center, mu[None])
    return Pose.from_matrix(R[0], t[0])


def l_pred(s: MCSampleSet) -> float:
    lw = s.log_weights
    lw = lw[np.isfinite(lw)]
    if lw.size == 0:
        raise ProbPnPError("degenerate sample set")
    # all weights zero counts as degenerate too
    val = logsumexp(lw) - math.log(len(s))
    if not math.isfinite(val):
        raise ProbPnPError("degenerate sample set")
    return float(val)


# --------------------------------------------------------------------------
# KL loss and gradients
# --------------------------------------------------------------------------


@dataclass
class GraspLoss:
    l_pred: float
    target_cost: float
    samples: MCSampleSet
    mode: SolveReport

    @property
    def total(self) -> float:
        return self.l_pred + self.target_cost


@dataclass
class KLResult:
    loss: float
    per_grasp: list[GraspLoss]


@dataclass
class GradientBundle:
    loss: float
    d_p2d: list[np.ndarray]
    d_w2d: list[np.ndarray]
    result: KLResult | None = None


def _grasp_rngs(rng, n: int) -> list[np.random.Generator]:
    if isinstance(rng, (int, np.integer)):
        base = int(rng)
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        base = int(rng.integers(2**63))
    return [np.random.default_rng([base, j]) for j in range(n)]


def find_mode(
    X: CorrespondenceSet, solver_cfg: SolverConfig, rng, init: Pose | None = None, branches: bool = True
) -> SolveReport:
    """Density mode.

    With ``init`` the search is warm-started from it and, when ``branches`` is
    set, also from both weak-perspective branches so a tracked mode can still
    jump to the other branch of the planar ambiguity.  The full multi-start is
    the fallback.
    """
    if init is not None:
        starts = [init] + (weak_perspective_starts(X) if branches else [])
        try:
            return multi_start_solve(X, solver_cfg, rng, starts=starts)
        except PnPError:
            pass
    return multi_start_solve(X, solver_cfg, rng)


def kl_loss(
    grasps,
    cfg: MCConfig = MCConfig(),
    rng=None,
    solver_cfg: SolverConfig = SolverConfig(),
    inits: list | None = None,
) -> KLResult:
    """Sum over predictions of ``l_pred + cost(X, y_gt)``.

    ``grasps`` is a sequence of ``(CorrespondenceSet, Pose | None)``.  Each
    prediction gets its own generator derived from ``rng`` and its index, so
    results do not depend on processing order.
    """
    grasps = list(grasps)
    rngs = _grasp_rngs(rng, len(grasps))
    per = []
    for j, (X, target) in enumerate(grasps):
        if target is None:
            raise ProbPnPError("missing supervision target")
        init = inits[j] if inits is not None else None
        mode = find_mode(X, solver_cfg, rngs[j], init)
        samples = amis_sample(X, mode, cfg, rngs[j])
        per.append(GraspLoss(l_pred(samples), weighted_cost(X, target), samples, mode))
    return KLResult(float(sum(g.total for g in per)), per)


def loss_from_samples(grasps, sample_sets: list[MCSampleSet]) -> float:
    """KL loss re-evaluated with frozen sample positions and proposal densities."""
    total = 0.0
    for (X, target), s in zip(grasps, sample_sets):
        total += l_pred(s.reweighted(X)) + weighted_cost(X, target)
    return total


def grad_from_samples(X: CorrespondenceSet, target: Pose, s: MCSampleSet):
    """Gradient of ``l_pred + cost(X, target)`` w.r.t. ``p2d`` and ``w2d`` for a fixed sample set."""
    s = s.reweighted(X)
    v = s.normalized_weights()
    w2 = X.w2d * X.w2d
    E = residuals_batch(X, s.rotations, s.translations)
    live = E != BEHIND_CAMERA_PENALTY
    Ev = np.where(live, E, 0.0)
    # d l_pred = -sum_k v_k d cost_k
    mean_E = np.einsum("k,kni->ni", v, Ev)
    mean_E2 = np.einsum("k,kni->ni", v, np.where(live, E * E, 0.0))
    d_p2d = w2 * mean_E
    d_w2d = -X.w2d * mean_E2
    Et = residuals_batch(X, target.R[None], target.trans[None])[0]
    live_t = Et != BEHIND_CAMERA_PENALTY
    d_p2d -= np.where(live_t, w2 * Et, 0.0)
    d_w2d += X.w2d * Et * Et
    return d_p2d, d_w2d


def kl_loss_grad(
    grasps,
    cfg: MCConfig = MCConfig(),
    rng=None,
    solver_cfg: SolverConfig = SolverConfig(),
    inits: list | None = None,
) -> GradientBundle:
    grasps = list(grasps)
    res = kl_loss(grasps, cfg, rng, solver_cfg, inits)
    d_p, d_w = [], []
    for (X, target), g in zip(grasps, res.per_grasp):
        a, b = grad_from_samples(X, target, g.samples)
        d_p.append(a)
        d_w.append(b)
    return GradientBundle(res.loss, d_p, d_w, res)


# --------------------------------------------------------------------------
# planar verification problems
# --------------------------------------------------------------------------


def solve_planar(X: CorrespondenceSet, init: Pose, solver_cfg: SolverConfig = SolverConfig()) -> SolveReport:
    return solve_pnp(X, init, solver_cfg, basis=PlanarChart.basis)


def planar_grid_oracle(X: CorrespondenceSet, z0: float, box, resolution: int, log: bool = False) -> float:
    """Midpoint-rule integral of ``exp(-cost)`` over ``(theta, x, y)`` in ``box``.

    Test-only reference for :func:`l_pred`.  ``box`` is
    ``((theta_lo, theta_hi), (x_lo, x_hi), (y_lo, y_hi))``.
    """
    (a0, a1), (x0, x1), (y0, y1) = box
    n = int(resolution)
    hth, hx, hy = (a1 - a0) / n, (x1 - x0) / n, (y1 - y0) / n
    thetas = a0 + hth * (np.arange(n) + 0.5)
    xs = x0 + hx * (np.arange(n) + 0.5)
    ys = y0 + hy * (np.arange(n) + 0.5)
    k = X.intrinsics
    w2 = X.w2d * X.w2d
    slices = np.empty(n)
    for i, th in enumerate(thetas):
        c, s = math.cos(th), math.sin(th)
        qx = c * X.p3d[:, 0] - s * X.p3d[:, 1]
        qy = s * X.p3d[:, 0] + c * X.p3d[:, 1]
        z = X.p3d[:, 2] + z0
        front = z > 1e-6
        zs = np.where(front, z, 1.0)
        # u is affine in x and v is affine in y at fixed theta
        eu = k.fx * (qx[None, :] + xs[:, None]) / zs + k.cx - X.p2d[:, 0]
        ev = k.fy * (qy[None, :] + ys[:, None]) / zs + k.cy - X.p2d[:, 1]
        eu = np.where(front, eu, BEHIND_CAMERA_PENALTY)
        ev = np.where(front, ev, BEHIND_CAMERA_PENALTY)
        cu = 0.5 * (eu * eu) @ w2[:, 0]
        cv = 0.5 * (ev * ev) @ w2[:, 1]
        slices[i] = logsumexp(-(cu[:, None] + cv[None, :]))
    val = logsumexp(slices) + math.log(hth * hx * hy)
    return float(val) if log else float(math.exp(val))


def planar_laplace_box(X: CorrespondenceSet, mode: Pose, half_width_sd: float = 10.0):
    """Integration box of ``half_width_sd`` Laplace standard deviations around a planar mode."""
    H = gauss_newton_hessian(X, mode, PlanarChart.basis)
    sd = np.sqrt(np.diag(np.linalg.inv(H)))
    theta = math.atan2(mode.R[1, 0], mode.R[0, 0])
    c = np.array([theta, mode.trans[0], mode.trans[1]])
    return tuple((float(ci - half_width_sd * si), float(ci + half_width_sd * si)) for ci, si in zip(c, sd))


__all__ = [
    "MCConfig", "SE3Chart", "PlanarChart", "ProposalDistribution", "MCSampleSet",
    "GradientBundle", "KLResult", "GraspLoss", "ProbPnPError",
    "log_likelihood", "amis_sample", "l_pred", "kl_loss", "kl_loss_grad",
    "loss_from_samples", "grad_from_samples", "planar_grid_oracle", "planar_pose",
    "solve_planar", "planar_laplace_box", "laplace_scale", "find_mode",
]

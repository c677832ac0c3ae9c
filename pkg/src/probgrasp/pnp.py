"""Confidence-weighted PnP: residuals, analytic Jacobians and a damped Gauss-Newton solver.

Residuals are ``project(K, R p3d + t) - p2d`` and are weighted elementwise by
the per-coordinate confidence ``w2d``.  All derivatives are taken in the
product chart of :func:`probgrasp.geometry.retract`, i.e. with respect to
``(phi, rho)`` where ``R <- exp(phi) R`` and ``t <- t + rho``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    MIN_DEPTH,
    CameraIntrinsics,
    Pose,
    project,
    so3_exp,
    rot_z,
)

# residual assigned to each coordinate of a point behind the camera
BEHIND_CAMERA_PENALTY = 1e6


class PnPError(RuntimeError):
    pass


@dataclass(frozen=True)
class Correspondence:
    p2d: np.ndarray
    p3d: np.ndarray
    w2d: np.ndarray = field(default_factory=lambda: np.ones(2))


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Stacked correspondences: ``p2d (N,2)``, ``p3d (N,3)``, ``w2d (N,2)``."""

    p2d: np.ndarray
    p3d: np.ndarray
    w2d: np.ndarray
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)

    def __post_init__(self):
        p2d = np.array(self.p2d, dtype=float).reshape(-1, 2)
        p3d = np.array(self.p3d, dtype=float).reshape(-1, 3)
        w2d = np.array(self.w2d, dtype=float)
        if w2d.ndim == 1:
            w2d = np.repeat(w2d[:, None], 2, axis=1) if w2d.size == len(p2d) else w2d.reshape(-1, 2)
        if not (len(p2d) == len(p3d) == len(w2d)):
            raise ValueError("p2d, p3d and w2d must have the same length")
        if not (np.all(np.isfinite(p2d)) and np.all(np.isfinite(p3d))):
            raise ValueError("correspondence coordinates must be finite")
        if np.any(w2d < 0) or not np.all(np.isfinite(w2d)):
            raise ValueError("weights must be finite and non-negative")
        object.__setattr__(self, "p2d", p2d)
        object.__setattr__(self, "p3d", p3d)
        object.__setattr__(self, "w2d", w2d)

    @classmethod
    def from_items(cls, items, intrinsics: CameraIntrinsics) -> "CorrespondenceSet":
        items = list(items)
        return cls(
            np.array([c.p2d for c in items], dtype=float).reshape(-1, 2),
            np.array([c.p3d for c in items], dtype=float).reshape(-1, 3),
            np.array([c.w2d for c in items], dtype=float).reshape(-1, 2),
            intrinsics,
        )

    def __len__(self):
        return len(self.p2d)

    @property
    def items(self) -> list[Correspondence]:
        return [Correspondence(a, b, c) for a, b, c in zip(self.p2d, self.p3d, self.w2d)]

    def replace(self, **kw) -> "CorrespondenceSet":
        args = dict(p2d=self.p2d, p3d=self.p3d, w2d=self.w2d, intrinsics=self.intrinsics)
        args.update(kw)
        return CorrespondenceSet(**args)

    def usable_count(self) -> int:
        return int(np.sum(np.all(self.w2d > 0, axis=1)))


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 100
    step_tol: float = 1e-10
    grad_tol: float = 1e-9
    n_starts: int = 8
    lambda_init: float = 1e-3
    lambda_min: float = 1e-12
    lambda_max: float = 1e6
    median_depth: float = 0.5
    start_rot_deg: float = 40.0
    start_trans: float = 0.1


@dataclass
class SolveReport:
    pose: Pose
    cost: float
    iterations: int
    converged: bool
    restart_index: int = 0


# --------------------------------------------------------------------------
# residuals
# --------------------------------------------------------------------------


def project_batch(k: CameraIntrinsics, R: np.ndarray, t: np.ndarray, p3d: np.ndarray):
    """Project ``p3d (N,3)`` under stacked poses ``R (K,3,3)``, ``t (K,3)``.

    Returns pixels ``(K,N,2)`` and a ``(K,N)`` mask of points in front of the camera.
    Points behind the camera get the penalty value instead of a projection.
    """
    pc = np.einsum("kij,nj->kni", R, p3d) + t[:, None, :]
    z = pc[..., 2]
    front = z > MIN_DEPTH
    zs = np.where(front, z, 1.0)
    uv = np.stack([k.fx * pc[..., 0] / zs + k.cx, k.fy * pc[..., 1] / zs + k.cy], axis=-1)
    return uv, front


def residuals_batch(X: CorrespondenceSet, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Unweighted residuals ``(K,N,2)``; behind-camera coordinates get the fixed penalty."""
    uv, front = project_batch(X.intrinsics, R, t, X.p3d)
    E = uv - X.p2d
    return np.where(front[..., None], E, BEHIND_CAMERA_PENALTY)


def costs_batch(X: CorrespondenceSet, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    r = X.w2d * residuals_batch(X, R, t)
    return 0.5 * np.sum(r * r, axis=(1, 2))


def reproj_error(c: Correspondence, k: CameraIntrinsics, y: Pose) -> np.ndarray:
    p = y.R @ np.asarray(c.p3d, dtype=float) + y.trans
    if p[2] <= MIN_DEPTH:
        return np.full(2, BEHIND_CAMERA_PENALTY)
    return project(k, p) - np.asarray(c.p2d, dtype=float)


def residuals(X: CorrespondenceSet, y: Pose) -> np.ndarray:
    return residuals_batch(X, y.R[None], y.trans[None])[0]


def weighted_cost(X: CorrespondenceSet, y: Pose) -> float:
    r = X.w2d * residuals(X, y)
    return 0.5 * float(np.sum(r * r))


def _residual_jacobian_rt(X: CorrespondenceSet, R: np.ndarray, t: np.ndarray):
    k = X.intrinsics
    rp = X.p3d @ R.T
    pc = rp + t
    x, yy, z = pc[:, 0], pc[:, 1], pc[:, 2]
    front = z > MIN_DEPTH
    zs = np.where(front, z, 1.0)
    iz = 1.0 / zs
    E = np.empty((len(X), 2))
    E[:, 0] = k.fx * x * iz + k.cx - X.p2d[:, 0]
    E[:, 1] = k.fy * yy * iz + k.cy - X.p2d[:, 1]
    # d(exp(phi) R p)/dphi = -[R p]_x, d/drho = I
    dp = np.zeros((len(X), 3, 6))
    dp[:, 0, 1], dp[:, 0, 2] = rp[:, 2], -rp[:, 1]
    dp[:, 1, 0], dp[:, 1, 2] = -rp[:, 2], rp[:, 0]
    dp[:, 2, 0], dp[:, 2, 1] = rp[:, 1], -rp[:, 0]
    dp[:, 0, 3] = dp[:, 1, 4] = dp[:, 2, 5] = 1.0
    J = np.empty((len(X), 2, 6))
    J[:, 0] = (k.fx * iz)[:, None] * (dp[:, 0] - (x * iz)[:, None] * dp[:, 2])
    J[:, 1] = (k.fy * iz)[:, None] * (dp[:, 1] - (yy * iz)[:, None] * dp[:, 2])
    if not np.all(front):
        E[~front] = BEHIND_CAMERA_PENALTY
        J[~front] = 0.0
    return E, J


def residual_jacobian(X: CorrespondenceSet, y: Pose):
    """Unweighted residuals ``(N,2)`` and their Jacobian ``(N,2,6)`` in the product chart."""
    return _residual_jacobian_rt(X, y.R, y.trans)


def cost_jacobian(X: CorrespondenceSet, y: Pose):
    """Gradient ``(6,)`` of the weighted cost and the weighted residual Jacobian ``(2N,6)``."""
    E, J = residual_jacobian(X, y)
    r = (X.w2d * E).reshape(-1)
    Jw = (X.w2d[:, :, None] * J).reshape(-1, 6)
    return Jw.T @ r, Jw


def gauss_newton_hessian(X: CorrespondenceSet, y: Pose, basis: np.ndarray | None = None) -> np.ndarray:
    _, Jw = cost_jacobian(X, y)
    if basis is not None:
        Jw = Jw @ basis
    return Jw.T @ Jw


# --------------------------------------------------------------------------
# solver
# --------------------------------------------------------------------------


def solve_pnp(
    X: CorrespondenceSet,
    init: Pose,
    cfg: SolverConfig = SolverConfig(),
    basis: np.ndarray | None = None,
    restart_index: int = 0,
) -> SolveReport:
    """Levenberg-Marquardt on the weighted reprojection cost starting from ``init``.

    ``basis`` (6 x d) restricts the update to a subspace of the chart, used by
    the reduced planar problems.
    """
    if X.usable_count() < 4 and basis is None:
        raise PnPError("underdetermined")
    W = X.w2d
    Wj = W[:, :, None]
    R, t = init.R, init.trans.copy()
    E, J = _residual_jacobian_rt(X, R, t)
    with np.errstate(over="ignore", invalid="ignore"):
        cost = 0.5 * float(np.sum((W * E) ** 2))
    if not math.isfinite(cost):
        raise PnPError("numerical failure")
    lam = cfg.lambda_init
    converged = False
    it = 0
    while it < cfg.max_iters:
        it += 1
        r = (W * E).reshape(-1)
        Jw = (Wj * J).reshape(-1, 6)
        if basis is not None:
            Jw = Jw @ basis
        g = Jw.T @ r
        if math.sqrt(g @ g) < cfg.grad_tol:
            converged = True
            break
        A = Jw.T @ Jw
        d = np.diag(A)
        d = np.maximum(d, 1e-12 * max(1.0, d.max()))
        accepted = False
        while True:
            try:
                step = -np.linalg.solve(A + lam * np.diag(d), g)
            except np.linalg.LinAlgError:
                step = None
            # a negligible step (undamped, or shrunk by rejections that could not lower
            # the cost) means the minimum is reached to roundoff
            if step is not None and math.sqrt(step @ step) < cfg.step_tol:
                converged = True
                break
            if step is not None and np.all(np.isfinite(step)):
                delta = step if basis is None else basis @ step
                R_new = so3_exp(delta[:3]) @ R
                t_new = t + delta[3:]
                E_new, J_new = _residual_jacobian_rt(X, R_new, t_new)
                cost_new = 0.5 * float(np.sum((W * E_new) ** 2))
                if cost_new <= cost:
                    accepted = True
                    break
            if lam >= cfg.lambda_max:
                break
            lam = min(lam * 10.0, cfg.lambda_max)
        if converged or not accepted:
            break
        R, t, E, J = R_new, t_new, E_new, J_new
        cost = cost_new
        lam = max(lam / 10.0, cfg.lambda_min)
        if math.sqrt(step @ step) < cfg.step_tol or cost == 0.0:
            converged = True
            break
    if not converged and it >= cfg.max_iters:
        # convergence reached on the last allowed iteration
        g = (Wj * J).reshape(-1, 6).T @ (W * E).reshape(-1)
        if basis is not None:
            g = basis.T @ g
        converged = bool(np.linalg.norm(g) < cfg.grad_tol)
    if not math.isfinite(cost):
        raise PnPError("numerical failure")
    # re-orthonormalize through the quaternion
    return SolveReport(Pose.from_matrix(R, t), cost, it, converged, restart_index)


_FACING_CAMERA = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])


def facing_start(X: CorrespondenceSet, cfg: SolverConfig = SolverConfig(), tilt=(0.0, 0.0)) -> Pose:
    """Pose with the model's dominant plane facing the camera, aligned to the keypoints in 2D.

    In-plane rotation and depth come from a weighted 2D similarity fit of the
    frontal model projection to the observed points.  ``tilt`` rotates the
    result about the camera x and y axes through the model centroid.
    """
    k = X.intrinsics
    R0 = _FACING_CAMERA
    w = X.w2d.mean(axis=1)
    if w.sum() <= 0:
        w = np.ones(len(X))
    w = w / w.sum()
    P = X.p3d @ R0.T
    m = P[:, :2] - w @ P[:, :2]
    obs = X.p2d / np.array([k.fx, k.fy])
    c_obs = w @ obs
    o = obs - c_obs
    a = np.sum(w * np.sum(m * o, axis=1))
    b = np.sum(w * (m[:, 0] * o[:, 1] - m[:, 1] * o[:, 0]))
    mm = np.sum(w * np.sum(m * m, axis=1))
    s = math.hypot(a, b) / mm if mm > 0 else 0.0
    depth = 1.0 / s if s > 0 else cfg.median_depth
    if not (0.05 <= depth <= 5.0):
        depth = cfg.median_depth
    R = so3_exp([tilt[0], tilt[1], 0.0]) @ rot_z(math.atan2(b, a)) @ R0
    centroid_px = c_obs * np.array([k.fx, k.fy])
    t = k.backproject(centroid_px, depth) - R @ (w @ X.p3d)
    return Pose.from_matrix(R, t)


def weak_perspective_starts(X: CorrespondenceSet) -> list[Pose]:
    """Both poses of the model's dominant plane under an affine (weak-perspective) camera.

    The 2D affine map from plane coordinates to normalized image coordinates
    fixes two rotation columns up to the sign of their depth components, which
    yields the two branches of the planar pose ambiguity.  Returns an empty
    list when the fit is degenerate (edge-on views).
    """
    k = X.intrinsics
    w = X.w2d.mean(axis=1)
    if w.sum() <= 0:
        return []
    w = w / w.sum()
    c3 = w @ X.p3d
    P = X.p3d - c3
    _, sv, Vt = np.linalg.svd(np.sqrt(w)[:, None] * P)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        return []
    e1, e2 = Vt[0], Vt[1]
    m = np.stack([P @ e1, P @ e2], axis=1)
    obs = (X.p2d - [k.cx, k.cy]) / [k.fx, k.fy]
    c_obs = w @ obs
    o = obs - c_obs
    M = m.T @ (w[:, None] * m)
    try:
        A = np.linalg.solve(M, m.T @ (w[:, None] * o)).T
    except np.linalg.LinAlgError:
        return []
    a, b = A[:, 0], A[:, 1]
    aa, bb, ab = a @ a, b @ b, a @ b
    # (1 - aa u)(1 - bb u) = ab^2 u^2 with u = depth^2
    qa, qb = aa * bb - ab * ab, -(aa + bb)
    if qa <= 1e-300:
        return []
    disc = qb * qb - 4.0 * qa
    if disc < 0:
        return []
    u = (-qb - math.sqrt(disc)) / (2.0 * qa)
    if not (u > 0):
        return []
    depth = math.sqrt(u)
    z1sq, z2sq = max(0.0, 1.0 - aa * u), max(0.0, 1.0 - bb * u)
    starts = []
    for sign in (1.0, -1.0):
        z1 = sign * math.sqrt(z1sq)
        z2 = -ab * u / z1 if abs(z1) > 1e-9 else math.sqrt(z2sq)
        r1 = np.append(a * depth, z1)
        r2 = np.append(b * depth, z2)
        r1 /= np.linalg.norm(r1)
        r2 -= (r2 @ r1) * r1
        n2 = np.linalg.norm(r2)
        if n2 < 1e-9:
            continue
        r2 /= n2
        Rc = np.stack([r1, r2, np.cross(r1, r2)], axis=1)
        Rm = np.stack([e1, e2, np.cross(e1, e2)], axis=1)
        R = Rc @ Rm.T
        if not (0.05 <= depth <= 5.0):
            continue
        t = np.append(c_obs * depth, depth) - R @ c3
        starts.append(Pose.from_matrix(R, t))
    return starts


def start_poses(X: CorrespondenceSet, cfg: SolverConfig, rng: np.random.Generator) -> list[Pose]:
    """Deterministic starts first, then random perturbations of the facing start.

    Deterministic starts are the two weak-perspective poses, the facing pose and
    four tilted facing poses; the tilts seed both basins of the two-fold
    ambiguity when the affine fit is unreliable.
    """
    tilt = math.radians(cfg.start_rot_deg)
    tilts = [(0.0, 0.0), (tilt, 0.0), (-tilt, 0.0), (0.0, tilt), (0.0, -tilt)]
    fixed = weak_perspective_starts(X) + [facing_start(X, cfg, tl) for tl in tilts]
    starts = fixed[: cfg.n_starts]
    base = fixed[len(fixed) - len(tilts)]
    for _ in range(len(starts), cfg.n_starts):
        phi = rng.uniform(-tilt, tilt, 3)
        t = base.trans + rng.uniform(-cfg.start_trans, cfg.start_trans, 3)
        if t[2] <= 0.05:
            t[2] = base.trans[2]
        starts.append(Pose.from_matrix(so3_exp(phi) @ base.R, t))
    return starts


def multi_start_solve(
    X: CorrespondenceSet,
    cfg: SolverConfig = SolverConfig(),
    rng: np.random.Generator | None = None,
    starts: list[Pose] | None = None,
) -> SolveReport:
    if X.usable_count() < 4:
        raise PnPError("underdetermined")
    if rng is None:
        rng = np.random.default_rng(0)
    if starts is None:
        starts = start_poses(X, cfg, rng)
    best = None
    for i, s in enumerate(starts):
        try:
            rep = solve_pnp(X, s, cfg, restart_index=i)
        except PnPError:
            continue
        if not rep.converged:
            continue
        if best is None or rep.cost < best.cost:
            best = rep
    if best is None:
        raise PnPError("no convergent solution")
    return best

"""Greedy nearest-neighbor assignment of predicted grasps to ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GripperModel, Pose, quat_multiply

_SYM_QUAT = GripperModel.symmetry_pose().quat


@dataclass(frozen=True)
class PoseDistanceParams:
    rho: float = 0.05  # meters per radian
    symmetric: bool = True

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")


@dataclass
class MatchResult:
    assignments: list = field(default_factory=list)  # (pred, gt, distance)
    unmatched: list = field(default_factory=list)

    def as_dict(self) -> dict[int, int]:
        return {p: g for p, g, _ in self.assignments}


def _angle_between(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    # vector part of conj(qa) * qb; atan2 keeps full precision near 0 and pi
    qa, qb = np.broadcast_arrays(qa, qb)
    w = np.abs(np.sum(qa * qb, axis=-1))
    v = qa[..., :1] * qb[..., 1:] - qb[..., :1] * qa[..., 1:] - np.cross(qa[..., 1:], qb[..., 1:])
    return 2.0 * np.arctan2(np.linalg.norm(v, axis=-1), w)


def rotation_distance(a: Pose, b: Pose, symmetric: bool = True) -> float:
    """Geodesic angle in radians, minimized over the gripper symmetry when requested."""
    ang = float(_angle_between(a.quat, b.quat))
    if symmetric:
        ang = min(ang, float(_angle_between(a.quat, quat_multiply(b.quat, _SYM_QUAT))))
    return ang


def pose_distance(a: Pose, b: Pose, p: PoseDistanceParams = PoseDistanceParams()) -> float:
    return float(np.linalg.norm(a.trans - b.trans)) + p.rho * rotation_distance(a, b, p.symmetric)


def distance_components(preds, gts, symmetric: bool = True):
    """Translation (m) and rotation (rad) distance matrices of shape (P, G)."""
    if not preds or not gts:
        return np.zeros((len(preds), len(gts))), np.zeros((len(preds), len(gts)))
    tp = np.array([p.trans for p in preds])
    tg = np.array([g.trans for g in gts])
    qp = np.array([p.quat for p in preds])
    qg = np.array([g.quat for g in gts])
    dt = np.linalg.norm(tp[:, None, :] - tg[None, :, :], axis=-1)
    ang = _angle_between(qp[:, None, :], qg[None, :, :])
    if symmetric:
        qs = np.array([quat_multiply(q, _SYM_QUAT) for q in qg])
        ang = np.minimum(ang, _angle_between(qp[:, None, :], qs[None, :, :]))
    return dt, ang


def distance_matrix(preds, gts, p: PoseDistanceParams = PoseDistanceParams()) -> np.ndarray:
    dt, ang = distance_components(preds, gts, p.symmetric)
    return dt + p.rho * ang


def greedy_assign(D: np.ndarray, allowed: np.ndarray | None = None):
    """Accept pairs in ascending distance order, ties by (row, col), while both sides are free."""
    n_p, n_g = D.shape
    if allowed is None:
        allowed = np.ones_like(D, dtype=bool)
    rows, cols = np.nonzero(allowed)
    order = np.lexsort((cols, rows, D[rows, cols]))
    used_p, used_g, out = set(), set(), []
    for i in order:
        r, c = int(rows[i]), int(cols[i])
        if r in used_p or c in used_g:
            continue
        used_p.add(r)
        used_g.add(c)
        out.append((r, c, float(D[r, c])))
    return out


def nn_match(preds, gts, p: PoseDistanceParams = PoseDistanceParams(), max_dist: float = 0.1) -> MatchResult:
    preds, gts = list(preds), list(gts)
    D = distance_matrix(preds, gts, p)
    pairs = greedy_assign(D, D <= max_dist)
    matched = {r for r, _, _ in pairs}
    return MatchResult(pairs, [i for i in range(len(preds)) if i not in matched])

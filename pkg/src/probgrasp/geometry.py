"""Rigid-body algebra, pinhole projection and the parallel-jaw gripper model.

Rotations are stored as unit quaternions ``(w, x, y, z)`` with ``w >= 0``.
Twists are 6-vectors ordered ``(omega, v)``: rotational part first.

Besides the SE(3) exponential, the optimizer and the samplers use a simpler
product chart on SO(3) x R^3::

    retract(pose, (phi, rho)) = (exp(phi) @ R, t + rho)

which keeps the translation Lebesgue measure separate from the rotation
Haar measure.  Batched helpers (``*_batch``) work on stacked arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8
# log map refuses rotations this close to pi
PI_MARGIN = 1e-12
MIN_DEPTH = 1e-6


class GeometryError(ValueError):
    pass


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# --------------------------------------------------------------------------
# SO(3)
# --------------------------------------------------------------------------


def so3_exp_batch(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula for stacked rotation vectors ``(..., 3)``."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    # Taylor series keep full precision for tiny angles
    a = np.where(small, 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, np.sin(safe) / safe)
    b = np.where(
        small,
        0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        (1.0 - np.cos(safe)) / (safe * safe),
    )
    K = skew_batch(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_exp(phi) -> np.ndarray:
    x, y, z = (float(v) for v in np.asarray(phi, dtype=float).reshape(3))
    theta2 = x * x + y * y + z * z
    if theta2 < 1e-8:
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        theta = math.sqrt(theta2)
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    return np.array([
        [1.0 - b * (y * y + z * z), b * x * y - a * z, b * x * z + a * y],
        [b * x * y + a * z, 1.0 - b * (x * x + z * z), b * y * z - a * x],
        [b * x * z - a * y, b * y * z + a * x, 1.0 - b * (x * x + y * y)],
    ])


def quat_from_matrix_batch(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, returns canonical quaternions with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    shape = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    q = np.empty((R.shape[0], 4))
    tr = R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2]
    diag = np.stack([tr, R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    pick = np.argmax(diag, axis=1)
    for case in range(4):
        m = pick == case
        if not np.any(m):
            continue
        Rm = R[m]
        if case == 0:
            s = 2.0 * np.sqrt(1.0 + tr[m])
            q[m, 0] = 0.25 * s
            q[m, 1] = (Rm[:, 2, 1] - Rm[:, 1, 2]) / s
            q[m, 2] = (Rm[:, 0, 2] - Rm[:, 2, 0]) / s
            q[m, 3] = (Rm[:, 1, 0] - Rm[:, 0, 1]) / s
        elif case == 1:
            s = 2.0 * np.sqrt(1.0 + Rm[:, 0, 0] - Rm[:, 1, 1] - Rm[:, 2, 2])
            q[m, 0] = (Rm[:, 2, 1] - Rm[:, 1, 2]) / s
            q[m, 1] = 0.25 * s
            q[m, 2] = (Rm[:, 0, 1] + Rm[:, 1, 0]) / s
            q[m, 3] = (Rm[:, 0, 2] + Rm[:, 2, 0]) / s
        elif case == 2:
            s = 2.0 * np.sqrt(1.0 + Rm[:, 1, 1] - Rm[:, 0, 0] - Rm[:, 2, 2])
            q[m, 0] = (Rm[:, 0, 2] - Rm[:, 2, 0]) / s
            q[m, 1] = (Rm[:, 0, 1] + Rm[:, 1, 0]) / s
            q[m, 2] = 0.25 * s
            q[m, 3] = (Rm[:, 1, 2] + Rm[:, 2, 1]) / s
        else:
            s = 2.0 * np.sqrt(1.0 + Rm[:, 2, 2] - Rm[:, 0, 0] - Rm[:, 1, 1])
            q[m, 0] = (Rm[:, 1, 0] - Rm[:, 0, 1]) / s
            q[m, 1] = (Rm[:, 0, 2] + Rm[:, 2, 0]) / s
            q[m, 2] = (Rm[:, 1, 2] + Rm[:, 2, 1]) / s
            q[m, 3] = 0.25 * s
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1.0
    return q.reshape(shape + (4,))


def matrix_from_quat_batch(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_log_batch(q: np.ndarray) -> np.ndarray:
    """Rotation vectors of canonical quaternions; angle in ``[0, pi]``."""
    q = np.asarray(q, dtype=float)
    w = q[..., 0]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    theta = 2.0 * np.arctan2(s, w)
    small = s < SMALL_ANGLE
    # theta / s -> 2 / w as s -> 0
    scale = np.where(small, 2.0 / np.where(small, w, 1.0), theta / np.where(small, 1.0, s))
    return v * scale[..., None]


def so3_log_batch(R: np.ndarray) -> np.ndarray:
    """Rotation vectors of rotation matrices.

    Uses the skew part directly away from pi and the quaternion route near it.
    """
    R = np.asarray(R, dtype=float)
    vee = 0.5 * np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    c = 0.5 * (R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2] - 1.0)
    s = np.linalg.norm(vee, axis=-1)
    theta = np.arctan2(s, c)
    small = s < 1e-4
    scale = np.where(small, 1.0 + theta * theta / 6.0, theta / np.where(small, 1.0, s))
    out = vee * scale[..., None]
    near_pi = c < -0.9
    if np.any(near_pi):
        out[near_pi] = quat_log_batch(quat_from_matrix_batch(R[near_pi]))
    return out


def so3_log(R) -> np.ndarray:
    return so3_log_batch(np.asarray(R, dtype=float)[None])[0]


def rotation_angle_batch(R: np.ndarray) -> np.ndarray:
    """Geodesic angle of rotation matrices, robust near 0 and pi."""
    q = quat_from_matrix_batch(R)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), q[..., 0])


def so3_left_jacobian(phi) -> np.ndarray:
    """Left Jacobian of SO(3); ``V`` in the SE(3) exponential."""
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    theta = math.sqrt(theta2)
    K = skew(phi)
    if theta < 1e-4:
        b = 0.5 - theta2 / 24.0
        c = 1.0 / 6.0 - theta2 / 120.0
    else:
        b = (1.0 - math.cos(theta)) / theta2
        c = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * K + c * (K @ K)


def haar_log_density_batch(phi: np.ndarray) -> np.ndarray:
    """log of the Haar-measure factor ``2(1 - cos|phi|)/|phi|^2`` in exponential coordinates."""
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < 1e-3
    safe = np.where(small, 1.0, theta)
    val = np.where(small, 1.0 - theta2 / 12.0 + theta2 * theta2 / 360.0,
                   2.0 * (1.0 - np.cos(safe)) / (safe * safe))
    return np.log(val)


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# --------------------------------------------------------------------------
# Pose
# --------------------------------------------------------------------------


def _canonical_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise GeometryError("quaternion must be finite and non-zero")
    q = q / n
    return -q if q[0] < 0 else q


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _canonical_quat(self.quat)
        t = np.array(self.trans, dtype=float).reshape(3)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_stored(cls, quat, trans) -> "Pose":
        """Rebuild a pose bit-for-bit from an already canonical quaternion (no renormalization)."""
        q = np.array(quat, dtype=float).reshape(4)
        if not np.all(np.isfinite(q)) or abs(np.linalg.norm(q) - 1.0) > 1e-9 or q[0] < 0:
            raise GeometryError("stored quaternion is not a canonical unit quaternion")
        p = cls(q, trans)
        q.setflags(write=False)
        object.__setattr__(p, "quat", q)
        return p

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(quat_from_matrix_batch(np.asarray(R, dtype=float)), t)

    @classmethod
    def from_rotvec(cls, phi, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls.from_matrix(so3_exp(phi), t)

    @property
    def R(self) -> np.ndarray:
        return matrix_from_quat_batch(self.quat)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.trans
        return T

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.trans

    def __matmul__(self, other: "Pose") -> "Pose":
        return pose_compose(self, other)

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.quat)
        t = ", ".join(f"{v:.6g}" for v in self.trans)
        return f"Pose(quat=[{q}], trans=[{t}])"


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def pose_compose(a: Pose, b: Pose) -> Pose:
    q = quat_multiply(a.quat, b.quat)
    return Pose(q, a.R @ b.trans + a.trans)


def pose_inverse(p: Pose) -> Pose:
    q = p.quat * np.array([1.0, -1.0, -1.0, -1.0])
    return Pose(q, -(p.R.T @ p.trans))


def se3_exp(twist) -> Pose:
    twist = np.asarray(twist, dtype=float).reshape(6)
    omega, v = twist[:3], twist[3:]
    return Pose.from_matrix(so3_exp(omega), so3_left_jacobian(omega) @ v)


def se3_log(p: Pose) -> np.ndarray:
    w = p.quat[0]
    if w < PI_MARGIN:
        raise GeometryError("log map singular")
    omega = quat_log_batch(p.quat)
    v = np.linalg.solve(so3_left_jacobian(omega), p.trans)
    return np.concatenate([omega, v])


def rotation_angle(a: Pose, b: Pose | None = None) -> float:
    """Geodesic angle of ``a`` or of the relative rotation between ``a`` and ``b``."""
    q = a.quat if b is None else quat_multiply(pose_inverse(b).quat, a.quat)
    return float(2.0 * math.atan2(np.linalg.norm(q[1:]), abs(q[0])))


# product chart on SO(3) x R^3


def retract(p: Pose, delta) -> Pose:
    delta = np.asarray(delta, dtype=float).reshape(6)
    return Pose.from_matrix(so3_exp(delta[:3]) @ p.R, p.trans + delta[3:])


def local(center: Pose, p: Pose) -> np.ndarray:
    return np.concatenate([so3_log(p.R @ center.R.T), p.trans - center.trans])


def retract_batch(center: Pose, deltas: np.ndarray):
    """Returns stacked ``(R, t)`` for deltas of shape ``(K, 6)``."""
    R = so3_exp_batch(deltas[:, :3]) @ center.R
    t = center.trans + deltas[:, 3:]
    return R, t


def local_batch(center: Pose, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    phi = so3_log_batch(R @ center.R.T)
    return np.concatenate([phi, t - center.trans], axis=1)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    return matrix_from_quat_batch(q / np.linalg.norm(q))


# --------------------------------------------------------------------------
# Camera and gripper
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 616.0
    fy: float = 616.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise GeometryError("image size must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)

    def backproject(self, uv, depth: float) -> np.ndarray:
        u, v = uv
        return np.array([(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth])


def project(k: CameraIntrinsics, p_cam) -> np.ndarray:
    """Pinhole projection of camera-frame points ``(..., 3)`` to pixels ``(..., 2)``."""
    p = np.asarray(p_cam, dtype=float)
    z = p[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise GeometryError("point behind or on camera plane")
    return np.stack([k.fx * p[..., 0] / z + k.cx, k.fy * p[..., 1] / z + k.cy], axis=-1)


@dataclass(frozen=True)
class GripperModel:
    """Parallel-jaw gripper: approach along +z, closing along +x.

    Corner order is fixed: base-left, base-right, tip-left, tip-right.
    """

    open_width: float = 0.08
    depth: float = 0.04

    def __post_init__(self):
        if self.open_width <= 0 or self.depth <= 0:
            raise GeometryError("gripper dimensions must be positive")

    @property
    def corners(self) -> np.ndarray:
        h = 0.5 * self.open_width
        return np.array([[-h, 0.0, 0.0], [h, 0.0, 0.0], [-h, 0.0, self.depth], [h, 0.0, self.depth]])

    @property
    def center(self) -> np.ndarray:
        """Grasp contact center (centroid of the corners) in the gripper frame."""
        return np.array([0.0, 0.0, 0.5 * self.depth])

    # 180 degrees about the approach axis swaps left and right fingers
    symmetry_permutation = (1, 0, 3, 2)

    @staticmethod
    def symmetry_pose() -> Pose:
        return Pose(np.array([0.0, 0.0, 0.0, 1.0]))


def gripper_keypoints_3d(g: GripperModel, grasp_pose: Pose) -> np.ndarray:
    return grasp_pose.apply(g.corners)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-in-world pose with the optical axis (+z) pointing at ``target``; image y points down."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    if abs(z @ up) > 1.0 - 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_matrix(np.stack([x, y, z], axis=1), eye)

"""Keypoint Map encoding/decoding and the 2D map losses.

Grid cells are addressed as ``(u, v)`` = (column, row); arrays are indexed
``[v, u]``.  A grasp whose refined center lies at pixel ``c`` occupies cell
``floor(c / stride)``, with the sub-pixel remainder in ``S`` and the
center-to-corner offsets in ``O``, so decoding is

    keypoint_k = (u, v) * stride + S(u, v) + O_k(u, v)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter

from .geometry import CameraIntrinsics, GripperModel, Pose, project

log = logging.getLogger(__name__)

N_KEYPOINTS = 4
FOCAL_EPS = 1e-6


@dataclass(eq=False)
class KeypointMap:
    H: np.ndarray  # (h, w) center probability
    S: np.ndarray  # (h, w, 2) sub-pixel center offsets
    O: np.ndarray  # (h, w, 4, 2) center-to-keypoint offsets
    W: np.ndarray  # (h, w, 4, 2) keypoint confidences
    stride: int = 4

    def __post_init__(self):
        h, w = self.H.shape
        if self.S.shape != (h, w, 2) or self.O.shape != (h, w, N_KEYPOINTS, 2) or self.W.shape != (h, w, N_KEYPOINTS, 2):
            raise ValueError("keypoint map grids must share spatial dimensions")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if np.any(self.H < 0) or np.any(self.H > 1):
            raise ValueError("heatmap values must lie in [0, 1]")

    @classmethod
    def empty(cls, width: int, height: int, stride: int = 4) -> "KeypointMap":
        if stride < 1:
            raise ValueError("stride must be >= 1")
        h, w = math.ceil(height / stride), math.ceil(width / stride)
        return cls(np.zeros((h, w)), np.zeros((h, w, 2)), np.zeros((h, w, N_KEYPOINTS, 2)),
                   np.zeros((h, w, N_KEYPOINTS, 2)), stride)

    @property
    def shape(self) -> tuple[int, int]:
        return self.H.shape

    def peak_mask(self) -> np.ndarray:
        return self.H >= 1.0

    def copy(self) -> "KeypointMap":
        return KeypointMap(self.H.copy(), self.S.copy(), self.O.copy(), self.W.copy(), self.stride)


@dataclass
class GraspDetection2D:
    center: np.ndarray
    keypoints: np.ndarray
    weights: np.ndarray
    score: float
    cell: tuple[int, int]


@dataclass
class EncodeResult:
    map: KeypointMap
    cells: list  # (u, v) per grasp, None when skipped
    skipped: int


def grasp_keypoints_2d(k: CameraIntrinsics, g: GripperModel, grasp_cam: Pose):
    """Projected center and the 4 corner keypoints of a grasp given in the camera frame."""
    center = project(k, grasp_cam.apply(g.center))
    corners = project(k, grasp_cam.apply(g.corners))
    return center, corners


def encode_keypoints(centers, keypoints, width: int, height: int, stride: int = 4) -> EncodeResult:
    """Encode projected centers ``(M,2)`` and keypoints ``(M,4,2)`` into a map."""
    m = KeypointMap.empty(width, height, stride)
    hgt, wid = m.shape
    vv, uu = np.mgrid[0:hgt, 0:wid]
    cells, skipped = [], 0
    for c, kp in zip(np.asarray(centers, dtype=float), np.asarray(keypoints, dtype=float)):
        if not (0 <= c[0] < width and 0 <= c[1] < height):
            cells.append(None)
            skipped += 1
            continue
        u, v = int(c[0] // stride), int(c[1] // stride)
        diameter = float(np.linalg.norm(kp.max(axis=0) - kp.min(axis=0)))
        sigma = max(2.0, diameter / (3.0 * stride))
        splat = np.exp(-((uu - u) ** 2 + (vv - v) ** 2) / (2.0 * sigma * sigma))
        np.maximum(m.H, splat, out=m.H)
        m.H[v, u] = 1.0
        m.S[v, u] = c - np.array([u, v], dtype=float) * stride
        m.O[v, u] = kp - c
        m.W[v, u] = 1.0
        cells.append((u, v))
    if skipped:
        log.warning("skipped %d grasp(s) with centers outside the image", skipped)
    return EncodeResult(m, cells, skipped)


def encode_grasps(grasps_cam, k: CameraIntrinsics, g: GripperModel, stride: int = 4) -> EncodeResult:
    """Encode grasp poses (camera frame) into a Keypoint Map.

    Grasps whose center lies behind the camera or outside the image are skipped.
    """
    centers, kps = [], []
    for pose in grasps_cam:
        try:
            c, kp = grasp_keypoints_2d(k, g, pose)
        except ValueError:
            c, kp = np.array([-1.0, -1.0]), np.zeros((N_KEYPOINTS, 2))
        centers.append(c)
        kps.append(kp)
    if not centers:
        return EncodeResult(KeypointMap.empty(k.width, k.height, stride), [], 0)
    return encode_keypoints(np.array(centers), np.array(kps), k.width, k.height, stride)


def decode_keypoints(m: KeypointMap, threshold: float = 0.3, top_k: int = 100) -> list[GraspDetection2D]:
    H = m.H
    peaks = (H == maximum_filter(H, size=3, mode="constant", cval=-np.inf)) & (H > threshold)
    vs, us = np.nonzero(peaks)  # row-major order
    scores = H[vs, us]
    order = np.argsort(-scores, kind="stable")[:top_k]
    out = []
    for i in order:
        u, v = int(us[i]), int(vs[i])
        center = np.array([u, v], dtype=float) * m.stride + m.S[v, u]
        out.append(GraspDetection2D(center, center + m.O[v, u], m.W[v, u].copy(), float(H[v, u]), (u, v)))
    return out


def focal_loss(pred_H: np.ndarray, gt_H: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> float:
    """Penalty-reduced pixelwise focal loss normalized by the number of peak cells."""
    p = np.clip(np.asarray(pred_H, dtype=float), FOCAL_EPS, 1.0 - FOCAL_EPS)
    gt = np.asarray(gt_H, dtype=float)
    if p.shape != gt.shape:
        raise ValueError("prediction and target grids differ in shape")
    pos = gt >= 1.0
    pos_loss = -np.sum(((1.0 - p) ** alpha * np.log(p))[pos])
    neg_loss = -np.sum(((1.0 - gt) ** beta * p**alpha * np.log1p(-p))[~pos])
    return float((pos_loss + neg_loss) / max(1, int(pos.sum())))


def focal_loss_grad(pred_H: np.ndarray, gt_H: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> np.ndarray:
    """Derivative of :func:`focal_loss` w.r.t. the (unclamped) prediction; zero where clamped."""
    raw = np.asarray(pred_H, dtype=float)
    p = np.clip(raw, FOCAL_EPS, 1.0 - FOCAL_EPS)
    gt = np.asarray(gt_H, dtype=float)
    pos = gt >= 1.0
    d_pos = alpha * (1.0 - p) ** (alpha - 1) * np.log(p) - (1.0 - p) ** alpha / p
    d_neg = -(1.0 - gt) ** beta * (alpha * p ** (alpha - 1) * np.log1p(-p) - p**alpha / (1.0 - p))
    grad = np.where(pos, d_pos, d_neg) / max(1, int(pos.sum()))
    return np.where((raw > FOCAL_EPS) & (raw < 1.0 - FOCAL_EPS), grad, 0.0)


def l1_offset_loss(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute error over every component of the masked cells; 0 for an empty mask."""
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError("prediction and target grids differ in shape")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    return float(np.mean(np.abs(pred[mask] - gt[mask])))


def l1_offset_loss_grad(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    grad = np.zeros_like(pred)
    if mask.any():
        n = pred[mask].size
        grad[mask] = np.sign(pred[mask] - gt[mask]) / n
    return grad


# --------------------------------------------------------------------------
# serialization: flat arrays with shape headers
# --------------------------------------------------------------------------

MAP_MAGIC = "KPMAP"
MAP_VERSION = 1


def save_map(m: KeypointMap, path) -> None:
    lines = [f"{MAP_MAGIC} {MAP_VERSION} stride={m.stride}"]
    for name in ("H", "S", "O", "W"):
        arr = getattr(m, name)
        lines.append(f"ARRAY {name} " + " ".join(str(d) for d in arr.shape))
        lines.append(" ".join(repr(float(x)) for x in arr.ravel()))
    lines.append("END")
    Path(path).write_text("\n".join(lines) + "\n")


def load_map(path) -> KeypointMap:
    from .scene import SceneFormatError

    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(MAP_MAGIC):
        raise SceneFormatError("line 1: missing map header")
    head = lines[0].split()
    if len(head) < 3 or head[1] != str(MAP_VERSION):
        raise SceneFormatError("unsupported schema version")
    stride = int(head[2].split("=", 1)[1])
    if lines[-1] != "END":
        raise SceneFormatError(f"line {len(lines)}: missing END record (truncated file)")
    arrays = {}
    i = 1
    while i < len(lines) - 1:
        parts = lines[i].split()
        if len(parts) < 2 or parts[0] != "ARRAY":
            raise SceneFormatError(f"line {i + 1}: expected ARRAY record")
        name, shape = parts[1], tuple(int(d) for d in parts[2:])
        try:
            values = np.array([float(x) for x in lines[i + 1].split()])
        except (IndexError, ValueError) as exc:
            raise SceneFormatError(f"line {i + 2}: bad values for array {name}") from exc
        if values.size != int(np.prod(shape)):
            raise SceneFormatError(f"line {i + 2}: array {name} has {values.size} values, expected {int(np.prod(shape))}")
        arrays[name] = values.reshape(shape)
        i += 2
    missing = {"H", "S", "O", "W"} - set(arrays)
    if missing:
        raise SceneFormatError(f"missing arrays: {sorted(missing)}")
    return KeypointMap(arrays["H"], arrays["S"], arrays["O"], arrays["W"], stride)

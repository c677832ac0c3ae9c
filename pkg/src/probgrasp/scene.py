"""Synthetic tabletop scenes of analytic primitives with exact antipodal grasp labels.

Every object frame has its origin on the support plane (z = 0) below the
object's center, and objects are placed by a yaw rotation plus an xy shift.
Grasp frames follow :class:`~probgrasp.geometry.GripperModel`: closing along
+x, approach along +z, contact center at ``(0, 0, depth / 2)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, GripperModel, Pose, look_at, pose_inverse, project, rot_z
from .pnp import CorrespondenceSet

log = logging.getLogger(__name__)

CATEGORIES = ("Cylinder", "Ring", "Stick", "Sphere", "SemiSphere", "Cuboid")

# number of size parameters and their sampling ranges (meters)
SIZE_RANGES = {
    "Cylinder": ((0.015, 0.035), (0.06, 0.15)),  # radius, height
    "Ring": ((0.05, 0.08), (0.021, 0.03)),  # major radius, minor radius
    "Stick": ((0.021, 0.03), (0.15, 0.25)),  # radius, length
    "Sphere": ((0.015, 0.035),),  # radius
    "SemiSphere": ((0.02, 0.035),),  # radius
    "Cuboid": ((0.02, 0.07), (0.02, 0.07), (0.05, 0.12)),  # extents x, y, z
}

SEMISPHERE_CONTACT_DEG = 1.5  # contact elevation on the dome, keeps normals near horizontal


class SceneError(RuntimeError):
    pass


class SceneFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PrimitiveObject:
    category: str
    size: tuple
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        if self.category not in SIZE_RANGES:
            raise SceneError(f"unknown category {self.category!r}")
        if len(self.size) != len(SIZE_RANGES[self.category]):
            raise SceneError(f"{self.category} takes {len(SIZE_RANGES[self.category])} size parameters")
        if any(not s > 0 for s in self.size):
            raise SceneError("size parameters must be positive")
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))

    @property
    def footprint_radius(self) -> float:
        """Radius of a vertical cylinder around the object axis that contains the object."""
        s = self.size
        return {
            "Cylinder": lambda: s[0],
            "Ring": lambda: s[0] + s[1],
            "Stick": lambda: math.hypot(0.5 * s[1], s[0]),
            "Sphere": lambda: s[0],
            "SemiSphere": lambda: s[0],
            "Cuboid": lambda: 0.5 * math.hypot(s[0], s[1]),
        }[self.category]()

    @property
    def height(self) -> float:
        s = self.size
        if self.category in ("Cylinder", "Ring"):
            return s[1] * (2.0 if self.category == "Ring" else 1.0)
        if self.category in ("Stick", "Sphere"):
            return 2.0 * s[0]
        return s[0] if self.category == "SemiSphere" else s[2]

    def lowest_point(self) -> float:
        """World z of the lowest surface point (0 for a resting object)."""
        return float(self.pose.trans[2])


@dataclass(frozen=True, eq=False)
class GraspLabel:
    pose: Pose  # gripper in world
    object_index: int
    width: float


@dataclass(eq=False)
class Scene:
    objects: list
    grasps: list
    camera: Pose  # camera in world
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    seed: int = 0

    def grasp_in_camera(self, i: int) -> Pose:
        return pose_inverse(self.camera) @ self.grasps[i].pose


@dataclass(frozen=True)
class SceneConfig:
    n_objects: int = 1
    categories: tuple = CATEGORIES
    workspace: float = 0.6  # side of the square placement area (m)
    elevation_deg: tuple = (30.0, 90.0)
    distance: tuple = (0.7, 0.9)
    angle_step_deg: float = 45.0
    spacing: float = 0.02
    max_grasps_per_object: int = 24
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    gripper: GripperModel = field(default_factory=GripperModel)

    def __post_init__(self):
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")
        bad = [c for c in self.categories if c not in SIZE_RANGES]
        if bad:
            raise ValueError(f"unknown categories: {bad}")


@dataclass(frozen=True)
class NoiseModel:
    sigma_px: float = 0.0
    outlier_fraction: float = 0.0
    outlier_magnitude: float = 30.0

    @property
    def outlier_count(self) -> int:
        # round half up so that 0.125 * 4 -> 1 rather than banker's 0
        return int(math.floor(self.outlier_fraction * 4 + 0.5))


@dataclass(eq=False)
class Observation:
    grasp_index: int
    correspondences: CorrespondenceSet
    target: Pose  # ground-truth grasp in the camera frame
    corrupted: np.ndarray  # (4,) bool
    noise: NoiseModel


# --------------------------------------------------------------------------
# analytic grasp families
# --------------------------------------------------------------------------


def _frame(closing, approach) -> np.ndarray:
    x = np.asarray(closing, dtype=float)
    z = np.asarray(approach, dtype=float)
    x = x / np.linalg.norm(x)
    z = z - (z @ x) * x
    z = z / np.linalg.norm(z)
    return np.stack([x, np.cross(z, x), z], axis=1)


def _angles(step_deg: float, span: float = 360.0) -> np.ndarray:
    n = max(1, int(round(span / step_deg)))
    return np.radians(np.arange(n) * span / n)


def _axis_positions(lo: float, hi: float, spacing: float) -> np.ndarray:
    if hi < lo:
        return np.empty(0)
    n = int(math.floor((hi - lo) / spacing)) + 1
    return lo + 0.5 * ((hi - lo) - (n - 1) * spacing) + spacing * np.arange(n)


def _candidates(obj: PrimitiveObject, step_deg: float, spacing: float):
    """Yield (contact center, closing direction, approach direction, width) in the object frame."""
    cat, s = obj.category, obj.size
    down = np.array([0.0, 0.0, -1.0])
    if cat == "Sphere":
        r = s[0]
        c0 = np.array([0.0, 0.0, r])
        for psi in _angles(step_deg, 180.0):
            cl = np.array([math.cos(psi), math.sin(psi), 0.0])
            side = np.cross(cl, down)
            for a in (side, -side, side + down, down - side, down):
                yield c0, cl, a, 2 * r
    elif cat == "Cylinder":
        r, h = s
        for psi in _angles(step_deg, 180.0):
            cl = np.array([math.cos(psi), math.sin(psi), 0.0])
            side = np.cross(cl, down)
            for z in _axis_positions(0.25 * h, 0.75 * h, max(spacing, 0.25 * h)):
                yield np.array([0.0, 0.0, z]), cl, side, 2 * r
                yield np.array([0.0, 0.0, z]), cl, -side, 2 * r
            yield np.array([0.0, 0.0, h - r]), cl, down, 2 * r
    elif cat == "Stick":
        r, length = s
        cl = np.array([0.0, 1.0, 0.0])
        for x in _axis_positions(-0.5 * length + r, 0.5 * length - r, max(spacing, 0.25 * length)):
            for tilt in np.radians([-30.0, 0.0, 30.0]):
                a = np.array([math.sin(tilt), 0.0, -math.cos(tilt)])
                yield np.array([x, 0.0, r]), cl, a, 2 * r
    elif cat == "Ring":
        big, r = s
        for psi in _angles(step_deg):
            radial = np.array([math.cos(psi), math.sin(psi), 0.0])
            tangent = np.array([-math.sin(psi), math.cos(psi), 0.0])
            for tilt in np.radians([-30.0, 0.0, 30.0]):
                a = math.cos(tilt) * down + math.sin(tilt) * tangent
                yield big * radial + np.array([0.0, 0.0, r]), radial, a, 2 * r
    elif cat == "SemiSphere":
        r = s[0]
        el = math.radians(SEMISPHERE_CONTACT_DEG)
        for psi in _angles(step_deg, 180.0):
            cl = np.array([math.cos(psi), math.sin(psi), 0.0])
            side = np.cross(cl, down)
            for sgn in (1.0, -1.0):
                yield np.array([0.0, 0.0, r * math.sin(el)]), cl, sgn * side, 2 * r * math.cos(el)
    elif cat == "Cuboid":
        ex, ey, ez = s
        c0 = np.array([0.0, 0.0, 0.5 * ez])
        for cl, width, other in ((np.array([1.0, 0.0, 0.0]), ex, np.array([0.0, 1.0, 0.0])),
                                 (np.array([0.0, 1.0, 0.0]), ey, np.array([1.0, 0.0, 0.0]))):
            yield c0, cl, down, width
            yield c0, cl, other, width
            yield c0, cl, -other, width


def grasp_labels_for_primitive(
    obj: PrimitiveObject,
    g: GripperModel = GripperModel(),
    spacing: float = 0.02,
    angle_step_deg: float = 45.0,
    object_index: int = 0,
) -> list[GraspLabel]:
    """Closed-form antipodal grasps whose gripper corners all stay above the support plane."""
    out = []
    for center, closing, approach, width in _candidates(obj, angle_step_deg, spacing):
        if width > g.open_width:
            continue
        R = _frame(closing, approach)
        local = Pose.from_matrix(R, center - R @ g.center)
        pose = obj.pose @ local
        if np.all(pose.apply(g.corners)[:, 2] > 0.0):
            out.append(GraspLabel(pose, object_index, float(width)))
    return out


# --------------------------------------------------------------------------
# analytic surface model (for antipodality checks)
# --------------------------------------------------------------------------


def surface_normal(obj: PrimitiveObject, p_world) -> np.ndarray:
    """Outward unit normal of the primitive at (or nearest to) a surface point."""
    p = pose_inverse(obj.pose).apply(np.asarray(p_world, dtype=float))
    cat, s = obj.category, obj.size
    if cat in ("Sphere", "SemiSphere"):
        n = p - np.array([0.0, 0.0, s[0] if cat == "Sphere" else 0.0])
    elif cat == "Cylinder":
        n = np.array([p[0], p[1], 0.0])
    elif cat == "Stick":
        n = np.array([0.0, p[1], p[2] - s[0]])
    elif cat == "Ring":
        radial = np.array([p[0], p[1], 0.0])
        radial /= np.linalg.norm(radial)
        n = p - (s[0] * radial + np.array([0.0, 0.0, s[1]]))
    else:
        half = np.array([0.5 * s[0], 0.5 * s[1], 0.5 * s[2]])
        q = (p - np.array([0.0, 0.0, half[2]])) / half
        n = np.zeros(3)
        n[int(np.argmax(np.abs(q)))] = np.sign(q[int(np.argmax(np.abs(q)))])
    return obj.pose.R @ (n / np.linalg.norm(n))


def signed_distance(obj: PrimitiveObject, p_world) -> float:
    p = pose_inverse(obj.pose).apply(np.asarray(p_world, dtype=float))
    cat, s = obj.category, obj.size
    if cat == "Sphere":
        return float(np.linalg.norm(p - [0, 0, s[0]]) - s[0])
    if cat == "SemiSphere":
        return float(max(np.linalg.norm(p) - s[0], -p[2]))
    if cat == "Cylinder":
        return float(max(math.hypot(p[0], p[1]) - s[0], -p[2], p[2] - s[1]))
    if cat == "Stick":
        return float(max(math.hypot(p[1], p[2] - s[0]) - s[0], abs(p[0]) - 0.5 * s[1]))
    if cat == "Ring":
        return float(math.hypot(math.hypot(p[0], p[1]) - s[0], p[2] - s[1]) - s[1])
    half = np.array([0.5 * s[0], 0.5 * s[1], 0.5 * s[2]])
    return float(np.max(np.abs(p - [0, 0, half[2]]) - half))


def contact_points(label: GraspLabel, g: GripperModel = GripperModel()) -> np.ndarray:
    """The two contacts, ``center -/+ closing * width / 2`` in world coordinates."""
    c = label.pose.apply(g.center)
    x = label.pose.R[:, 0]
    return np.stack([c - 0.5 * label.width * x, c + 0.5 * label.width * x])


# --------------------------------------------------------------------------
# scene sampling and observation
# --------------------------------------------------------------------------


def sample_object(category: str, rng: np.random.Generator) -> PrimitiveObject:
    size = tuple(float(rng.uniform(lo, hi)) for lo, hi in SIZE_RANGES[category])
    return PrimitiveObject(category, size)


def place(obj: PrimitiveObject, x: float, y: float, yaw: float) -> PrimitiveObject:
    return PrimitiveObject(obj.category, obj.size, Pose.from_matrix(rot_z(yaw), (x, y, 0.0)))


def sample_camera(cfg: SceneConfig, target: np.ndarray, rng: np.random.Generator) -> Pose:
    el = math.radians(rng.uniform(*cfg.elevation_deg))
    az = rng.uniform(0.0, 2.0 * math.pi)
    dist = rng.uniform(*cfg.distance)
    eye = target + dist * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    return look_at(eye, target)


def keypoints_in_image(k: CameraIntrinsics, g: GripperModel, grasp_cam: Pose) -> bool:
    pts = grasp_cam.apply(g.corners)
    if np.any(pts[:, 2] <= 0.05):
        return False
    return bool(np.all(k.contains(project(k, pts))))


def sample_scene(cfg: SceneConfig, rng) -> Scene:
    """Deterministic function of ``cfg`` and the seed carried by ``rng``.

    ``rng`` may be an int seed or a Generator; the recorded seed is the int, or
    a value drawn from the Generator.
    """
    seed = int(rng) if isinstance(rng, (int, np.integer)) else int(rng.integers(2**31))
    gen = np.random.default_rng(seed)
    half = 0.5 * cfg.workspace
    objects, attempts = [], 0
    while len(objects) < cfg.n_objects:
        obj = sample_object(cfg.categories[int(gen.integers(len(cfg.categories)))], gen)
        r = obj.footprint_radius
        while True:
            attempts += 1
            if attempts > 1000:
                raise SceneError("scene too crowded")
            x, y = gen.uniform(-half + r, half - r, 2) if half > r else (0.0, 0.0)
            if all(math.hypot(x - o.pose.trans[0], y - o.pose.trans[1]) >= r + o.footprint_radius for o in objects):
                break
        objects.append(place(obj, x, y, gen.uniform(0.0, 2.0 * math.pi)))

    centroid = np.mean([o.pose.trans + [0.0, 0.0, 0.5 * o.height] for o in objects], axis=0)
    camera = sample_camera(cfg, centroid, gen)
    cam_inv = pose_inverse(camera)
    grasps = []
    for j, obj in enumerate(objects):
        labels = grasp_labels_for_primitive(obj, cfg.gripper, cfg.spacing, cfg.angle_step_deg, j)
        labels = [lb for lb in labels if keypoints_in_image(cfg.intrinsics, cfg.gripper, cam_inv @ lb.pose)]
        if len(labels) > cfg.max_grasps_per_object:
            keep = np.sort(gen.choice(len(labels), cfg.max_grasps_per_object, replace=False))
            labels = [labels[i] for i in keep]
        grasps.extend(labels)
    return Scene(objects, grasps, camera, cfg.intrinsics, seed)


def observe_grasp(s: Scene, i: int, noise: NoiseModel, rng: np.random.Generator, g: GripperModel = GripperModel()) -> Observation:
    target = s.grasp_in_camera(i)
    p2d = project(s.intrinsics, target.apply(g.corners))
    if noise.sigma_px > 0:
        p2d = p2d + rng.normal(0.0, noise.sigma_px, p2d.shape)
    corrupted = np.zeros(4, dtype=bool)
    n_out = noise.outlier_count
    if n_out:
        idx = rng.choice(4, n_out, replace=False)
        ang = rng.uniform(0.0, 2.0 * math.pi, n_out)
        p2d[idx] += noise.outlier_magnitude * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        corrupted[idx] = True
    X = CorrespondenceSet(p2d, g.corners.copy(), np.ones((4, 2)), s.intrinsics)
    return Observation(i, X, target, corrupted, noise)


def observe_scene(s: Scene, noise: NoiseModel = NoiseModel(), rng=None, g: GripperModel = GripperModel()) -> list[Observation]:
    rng = np.random.default_rng(s.seed if rng is None else rng)
    return [observe_grasp(s, i, noise, rng, g) for i in range(len(s.grasps))]


# --------------------------------------------------------------------------
# file format
# --------------------------------------------------------------------------

SCENE_MAGIC = "PROBGRASP-SCENE"
SCENE_VERSION = 1


def _f(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def format_scene(s: Scene) -> str:
    k = s.intrinsics
    lines = [f"{SCENE_MAGIC} {SCENE_VERSION} seed={s.seed} objects={len(s.objects)} grasps={len(s.grasps)}",
             f"CAMERA {_f([k.fx, k.fy, k.cx, k.cy])} {k.width} {k.height} {_f(s.camera.quat)} {_f(s.camera.trans)}"]
    for i, o in enumerate(s.objects):
        lines.append(f"OBJECT {i} {o.category} {len(o.size)} {_f(o.size)} {_f(o.pose.quat)} {_f(o.pose.trans)}")
    for i, gl in enumerate(s.grasps):
        lines.append(f"GRASP {i} {gl.object_index} {repr(gl.width)} {_f(gl.pose.quat)} {_f(gl.pose.trans)}")
    lines.append("END")
    return "\n".join(lines) + "\n"


def save_scene(s: Scene, path) -> None:
    Path(path).write_text(format_scene(s))


def _floats(tokens, lineno: int, what: str) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise SceneFormatError(f"line {lineno}: bad number in {what}") from exc


def parse_scene(text: str) -> Scene:
    lines = text.splitlines()
    if not lines:
        raise SceneFormatError("line 1: empty file")
    head = lines[0].split()
    if not head or head[0] != SCENE_MAGIC:
        raise SceneFormatError("line 1: missing scene header")
    if len(head) < 2 or head[1] != str(SCENE_VERSION):
        raise SceneFormatError("unsupported schema version")
    try:
        meta = dict(item.split("=", 1) for item in head[2:])
        seed, n_obj, n_gr = int(meta["seed"]), int(meta["objects"]), int(meta["grasps"])
    except (KeyError, ValueError) as exc:
        raise SceneFormatError("line 1: malformed header fields") from exc
    if lines[-1].strip() != "END":
        raise SceneFormatError(f"line {len(lines)}: missing END record (truncated file)")
    camera = intr = None
    objects, grasps = [], []
    for lineno, line in enumerate(lines[1:-1], start=2):
        tok = line.split()
        if not tok:
            continue
        kind = tok[0]
        if kind == "CAMERA":
            if len(tok) != 14:
                raise SceneFormatError(f"line {lineno}: CAMERA expects 13 fields")
            fx, fy, cx, cy = _floats(tok[1:5], lineno, "intrinsics")
            try:
                intr = CameraIntrinsics(fx, fy, cx, cy, int(tok[5]), int(tok[6]))
            except ValueError as exc:
                raise SceneFormatError(f"line {lineno}: bad image size") from exc
            vals = _floats(tok[7:14], lineno, "camera pose")
            camera = Pose.from_stored(vals[:4], vals[4:])
        elif kind == "OBJECT":
            if len(tok) < 4:
                raise SceneFormatError(f"line {lineno}: OBJECT record too short")
            cat = tok[2]
            if cat not in SIZE_RANGES:
                raise SceneFormatError(f"line {lineno}: unknown category {cat!r}")
            n = int(tok[3])
            if len(tok) != 4 + n + 7:
                raise SceneFormatError(f"line {lineno}: OBJECT field count mismatch")
            vals = _floats(tok[4:], lineno, "object")
            objects.append(PrimitiveObject(cat, tuple(vals[:n]), Pose.from_stored(vals[n:n + 4], vals[n + 4:])))
        elif kind == "GRASP":
            if len(tok) != 11:
                raise SceneFormatError(f"line {lineno}: GRASP expects 10 fields")
            vals = _floats(tok[3:], lineno, "grasp")
            grasps.append(GraspLabel(Pose.from_stored(vals[1:5], vals[5:8]), int(tok[2]), vals[0]))
        else:
            raise SceneFormatError(f"line {lineno}: unknown record {kind!r}")
    if camera is None:
        raise SceneFormatError("missing CAMERA record")
    if len(objects) != n_obj or len(grasps) != n_gr:
        raise SceneFormatError("record counts do not match header")
    if any(not 0 <= gl.object_index < n_obj for gl in grasps):
        raise SceneFormatError("grasp references a missing object")
    return Scene(objects, grasps, camera, intr, seed)


def load_scene(path) -> Scene:
    return parse_scene(Path(path).read_text())


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Bitwise equality of all numeric fields."""
    def same(x, y):
        return np.array_equal(np.asarray(x), np.asarray(y))

    if (a.seed, a.intrinsics, len(a.objects), len(a.grasps)) != (b.seed, b.intrinsics, len(b.objects), len(b.grasps)):
        return False
    if not (same(a.camera.quat, b.camera.quat) and same(a.camera.trans, b.camera.trans)):
        return False
    for o, p in zip(a.objects, b.objects):
        if o.category != p.category or o.size != p.size or not same(o.pose.quat, p.pose.quat) or not same(o.pose.trans, p.pose.trans):
            return False
    for g1, g2 in zip(a.grasps, b.grasps):
        if g1.object_index != g2.object_index or g1.width != g2.width:
            return False
        if not (same(g1.pose.quat, g2.pose.quat) and same(g1.pose.trans, g2.pose.trans)):
            return False
    return True


def scene_files(directory) -> list[Path]:
    return sorted(Path(directory).glob("scene_*.txt"))

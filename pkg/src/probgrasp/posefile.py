"""Pose files: one grasp per line.

    <scene id> <grasp id> qw qx qy qz tx ty tz <score> <reprojection cost>

Poses are grippers in the world frame.  Lines starting with ``#`` are comments.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .geometry import Pose
from .scene import SceneFormatError


@dataclass(frozen=True, eq=False)
class PoseRecord:
    scene_id: str
    grasp_id: int
    pose: Pose
    score: float
    cost: float


HEADER = "# scene_id grasp_id qw qx qy qz tx ty tz score cost"


def format_records(records) -> str:
    lines = [HEADER]
    for r in records:
        vals = [*r.pose.quat, *r.pose.trans, r.score, r.cost]
        lines.append(f"{r.scene_id} {r.grasp_id} " + " ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def write_poses(records, path) -> None:
    Path(path).write_text(format_records(records))


def read_poses(path) -> list[PoseRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 11:
            raise SceneFormatError(f"{path}:{lineno}: expected 11 fields, got {len(tok)}")
        try:
            vals = [float(t) for t in tok[2:]]
            out.append(PoseRecord(tok[0], int(tok[1]), Pose.from_stored(vals[:4], vals[4:7]), vals[7], vals[8]))
        except ValueError as exc:
            raise SceneFormatError(f"{path}:{lineno}: {exc}") from exc
    return out

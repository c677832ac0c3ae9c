"""Grasp success / coverage metrics over a threshold grid, and report emission."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose
from .matching import PoseDistanceParams, distance_components, greedy_assign


@dataclass(frozen=True)
class SuccessThresholds:
    translation: float  # meters
    rotation: float  # degrees

    def __post_init__(self):
        if not (self.translation > 0 and self.rotation > 0):
            raise ValueError("thresholds must be positive")

    @property
    def label(self) -> str:
        return f"{self.translation * 100:g}cm/{self.rotation:g}deg"


DEFAULT_GRID = tuple(
    SuccessThresholds(cm / 100.0, deg) for deg in (10.0, 20.0, 45.0) for cm in (1.0, 1.5, 2.0, 5.0)
)

# Externally reported success rates (%) of CNN-based detectors, columns
# 1.0 / 1.5 / 2.0 cm; keyed by (angle deg, method, setting).  Context only.
REFERENCE_TABLE = {
    (10, "center-implicit baseline", "single"): (20.5, 44.5, 56.8),
    (10, "center-implicit baseline", "multi"): (13.9, 33.3, 50.4),
    (10, "keypoint network", "single"): (60.0, 71.7, 78.7),
    (10, "keypoint network", "multi"): (69.3, 73.6, 83.2),
    (10, "keypoint network v2", "single"): (91.4, 97.1, 97.7),
    (10, "keypoint network v2", "multi"): (84.9, 87.9, 89.9),
    (10, "probabilistic keypoint net", "single"): (93.4, 96.5, 98.5),
    (10, "probabilistic keypoint net", "multi"): (90.9, 93.9, 96.9),
    (20, "center-implicit baseline", "single"): (19.5, 54.5, 66.8),
    (20, "center-implicit baseline", "multi"): (33.5, 54.5, 71.8),
    (20, "keypoint network", "single"): (82.2, 84.0, 91.5),
    (20, "keypoint network", "multi"): (86.0, 86.7, 94.3),
    (20, "keypoint network v2", "single"): (99.4, 99.5, 100.0),
    (20, "keypoint network v2", "multi"): (90.9, 93.9, 96.1),
    (20, "probabilistic keypoint net", "single"): (99.1, 99.5, 100.0),
    (20, "probabilistic keypoint net", "multi"): (95.2, 97.5, 98.1),
}
REFERENCE_LABEL = "externally reported, CNN-dependent, not reproduced here"


def parse_thresholds(text: str) -> tuple[SuccessThresholds, ...]:
    """Parse ``"1.0:10,1.5:10"`` (centimeters:degrees) into thresholds."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            cm, deg = item.split(":")
            out.append(SuccessThresholds(float(cm) / 100.0, float(deg)))
        except ValueError as exc:
            raise ValueError(f"bad threshold {item!r}; expected CM:DEG") from exc
    if not out:
        raise ValueError("empty threshold list")
    return tuple(out)


def _qualifying(preds, gts, th: SuccessThresholds, params: PoseDistanceParams):
    dt, ang = distance_components(preds, gts, params.symmetric)
    ok = (dt <= th.translation) & (np.degrees(ang) <= th.rotation)
    return dt + params.rho * ang, ok


def grasp_success(pred: Pose, gts, th: SuccessThresholds, params: PoseDistanceParams = PoseDistanceParams()):
    """``(success, matched GT index or None)``."""
    if not gts:
        raise ValueError("ground-truth list is empty")
    D, ok = _qualifying([pred], list(gts), th, params)
    if not ok.any():
        return False, None
    d = np.where(ok[0], D[0], np.inf)
    return True, int(np.argmin(d))


@dataclass
class SceneCounts:
    predictions: int
    gts: int
    successes: int
    covered: int


@dataclass
class GridResult:
    thresholds: SuccessThresholds
    scenes: list[SceneCounts]

    @property
    def predictions(self) -> int:
        return sum(s.predictions for s in self.scenes)

    @property
    def gts(self) -> int:
        return sum(s.gts for s in self.scenes)

    @property
    def successes(self) -> int:
        return sum(s.successes for s in self.scenes)

    @property
    def covered(self) -> int:
        return sum(s.covered for s in self.scenes)

    @property
    def success_rate(self) -> float:
        return self.successes / self.predictions if self.predictions else 0.0

    @property
    def coverage_rate(self) -> float:
        return self.covered / self.gts if self.gts else 0.0


@dataclass
class EvalReport:
    results: list[GridResult] = field(default_factory=list)

    def lookup(self, th: SuccessThresholds) -> GridResult:
        for r in self.results:
            if r.thresholds == th:
                return r
        raise KeyError(th.label)


def scene_counts(preds, gts, th: SuccessThresholds, params: PoseDistanceParams = PoseDistanceParams()) -> SceneCounts:
    preds, gts = list(preds), list(gts)
    if not preds or not gts:
        return SceneCounts(len(preds), len(gts), 0, 0)
    D, ok = _qualifying(preds, gts, th, params)
    successes = len(greedy_assign(D, ok))
    # coverage: a GT counts as found when any prediction lands within both thresholds
    covered = int(ok.any(axis=0).sum())
    return SceneCounts(len(preds), len(gts), successes, covered)


def evaluate(pred_sets, gt_sets, grid=DEFAULT_GRID, params: PoseDistanceParams = PoseDistanceParams()) -> EvalReport:
    """Aggregate success and coverage over scenes for every threshold pair.

    ``pred_sets`` and ``gt_sets`` are aligned per-scene lists of poses.
    """
    pred_sets, gt_sets = list(pred_sets), list(gt_sets)
    if len(pred_sets) != len(gt_sets):
        raise ValueError(f"{len(pred_sets)} prediction sets for {len(gt_sets)} scenes")
    report = EvalReport()
    for th in grid:
        report.results.append(GridResult(th, [scene_counts(p, g, th, params) for p, g in zip(pred_sets, gt_sets)]))
    return report


CSV_HEADER = ["translation_cm", "rotation_deg", "success_rate", "coverage_rate", "successes", "predictions", "covered", "gts"]


def emit_report(r: EvalReport, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and a text table ``<path>.txt``; returns both paths."""
    base = Path(path)
    if base.suffix in (".csv", ".txt"):
        base = base.with_suffix("")
    csv_path, txt_path = base.with_suffix(".csv"), base.with_suffix(".txt")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for g in r.results:
            w.writerow([repr(g.thresholds.translation * 100.0), repr(g.thresholds.rotation), repr(g.success_rate),
                        repr(g.coverage_rate), g.successes, g.predictions, g.covered, g.gts])
    txt_path.write_text(format_table(r))
    return csv_path, txt_path


def format_table(r: EvalReport) -> str:
    """Success rates (%) with translation thresholds as columns and angles as rows."""
    cms = sorted({g.thresholds.translation for g in r.results})
    degs = sorted({g.thresholds.rotation for g in r.results})
    cell = {(g.thresholds.translation, g.thresholds.rotation): g for g in r.results}
    lines = ["Success rate (%) / coverage rate (%)", ""]
    head = "angle".ljust(8) + "".join(f"{c * 100:>8g} cm".rjust(18) for c in cms)
    lines.append(head)
    for d in degs:
        row = f"{d:g}deg".ljust(8)
        for c in cms:
            g = cell.get((c, d))
            row += ("-" if g is None else f"{100 * g.success_rate:6.1f} / {100 * g.coverage_rate:5.1f}").rjust(18)
        lines.append(row)
    lines += ["", f"Reference success rates ({REFERENCE_LABEL}):",
              "angle".ljust(8) + "method".ljust(28) + "setting".ljust(9) + "".join(f"{c:>8}" for c in ("1.0cm", "1.5cm", "2.0cm"))]
    for (deg, name, setting), vals in REFERENCE_TABLE.items():
        lines.append(f"{deg}deg".ljust(8) + name.ljust(28) + setting.ljust(9) + "".join(f"{v:8.1f}" for v in vals))
    return "\n".join(lines) + "\n"


def load_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("translation_cm", "rotation_deg", "success_rate", "coverage_rate"):
            row[key] = float(row[key])
        for key in ("successes", "predictions", "covered", "gts"):
            row[key] = int(row[key])
    return rows


def median_pose_errors(preds, gts, symmetric: bool = True) -> tuple[float, float]:
    """Median translation (cm) and rotation (deg) error over aligned prediction/GT pairs."""
    if not preds:
        return math.nan, math.nan
    dt, ang = distance_components(list(preds), list(gts), symmetric)
    idx = np.arange(len(preds))
    return float(np.median(dt[idx, idx]) * 100.0), float(np.degrees(np.median(ang[idx, idx])))

"""Run configuration: defaults < config file < command-line flags.

The config file is flat ``section.key=value`` text; ``#`` starts a comment.
Every resolved value remembers where it came from so ``--verbose`` can print
the provenance of each field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .geometry import GripperModel
from .matching import PoseDistanceParams
from .metrics import DEFAULT_GRID, SuccessThresholds, parse_thresholds
from .pnp import SolverConfig
from .prob_pnp import MCConfig
from .scene import CATEGORIES, NoiseModel, SceneConfig
from .trainer import LossWeights, OptimConfig


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_tuple(kind):
    def parse(text: str) -> tuple:
        text = text.strip()
        return tuple(kind(x) for x in text.split(",") if x.strip()) if text else ()

    return parse


def _fmt_thresholds(grid) -> str:
    return ",".join(f"{t.translation * 100:g}:{t.rotation:g}" for t in grid)


_TRAIN_MC = OptimConfig().mc

# key -> (parser, default)
SCHEMA: dict[str, tuple] = {"run.seed": (int, 0)}
for _f in fields(SolverConfig):
    SCHEMA[f"solver.{_f.name}"] = (type(_f.default), _f.default)
for _f in fields(MCConfig):
    SCHEMA[f"mc.{_f.name}"] = (type(_f.default), _f.default)
for _f in fields(LossWeights):
    SCHEMA[f"loss.{_f.name}"] = (float, _f.default)
for _f in fields(NoiseModel):
    SCHEMA[f"noise.{_f.name}"] = (float, _f.default)
SCHEMA.update({
    "scene.n_objects": (int, 1),
    "scene.categories": (_parse_tuple(str), CATEGORIES),
    "scene.workspace": (float, SceneConfig.workspace),
    "scene.elevation_min": (float, SceneConfig.elevation_deg[0]),
    "scene.elevation_max": (float, SceneConfig.elevation_deg[1]),
    "scene.distance_min": (float, SceneConfig.distance[0]),
    "scene.distance_max": (float, SceneConfig.distance[1]),
    "scene.angle_step_deg": (float, SceneConfig.angle_step_deg),
    "scene.spacing": (float, SceneConfig.spacing),
    "scene.max_grasps_per_object": (int, SceneConfig.max_grasps_per_object),
    "gripper.open_width": (float, GripperModel.open_width),
    "gripper.depth": (float, GripperModel.depth),
    "optim.iters": (int, OptimConfig.iters),
    "optim.lr_px": (float, OptimConfig.lr_px),
    "optim.lr_logit": (float, OptimConfig.lr_logit),
    "optim.lr_map": (float, OptimConfig.lr_map),
    "optim.momentum": (float, OptimConfig.momentum),
    "optim.milestones": (_parse_tuple(int), ()),
    "optim.fixed_mc_seed": (_parse_bool, False),
    "optim.precondition_px": (_parse_bool, True),
    "optim.clip_logit_grad": (float, OptimConfig.clip_logit_grad),
    "optim.branch_check_every": (int, OptimConfig.branch_check_every),
    "optim.max_match_dist": (float, math.inf),
    "optim.mc_rounds": (int, _TRAIN_MC.rounds),
    "optim.mc_k_per_round": (int, _TRAIN_MC.k_per_round),
    "optim.perturb_px": (float, 8.0),
    "match.rho": (float, PoseDistanceParams.rho),
    "match.max_dist": (float, 0.1),
    "match.symmetric": (_parse_bool, True),
    "eval.thresholds": (parse_thresholds, DEFAULT_GRID),
})
# bool fields in dataclasses must not go through bool("false")
for _k, (_p, _d) in list(SCHEMA.items()):
    if _p is bool:
        SCHEMA[_k] = (_parse_bool, _d)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})
    sources: dict = field(default_factory=lambda: {k: "default" for k in SCHEMA})

    def set(self, key: str, value, source: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        if isinstance(value, str):
            try:
                value = parser(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source}: bad value for {key}: {exc}") from exc
        self.values[key] = value
        self.sources[key] = source

    def __getitem__(self, key: str):
        return self.values[key]

    def load_file(self, path) -> None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc.strerror}") from exc
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{p}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"{p}:{lineno}: unknown config key {key!r}")
            self.set(key, value, f"file:{p}:{lineno}")

    def describe(self) -> str:
        out = []
        for key in sorted(self.values):
            v = self.values[key]
            if key == "eval.thresholds":
                v = _fmt_thresholds(v)
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{key}={v}  [{self.sources[key]}]")
        return "\n".join(out)

    # typed views

    @property
    def seed(self) -> int:
        return int(self["run.seed"])

    def solver(self) -> SolverConfig:
        return SolverConfig(**{f.name: self[f"solver.{f.name}"] for f in fields(SolverConfig)})

    def mc(self) -> MCConfig:
        return MCConfig(**{f.name: self[f"mc.{f.name}"] for f in fields(MCConfig)})

    def loss_weights(self) -> LossWeights:
        return LossWeights(**{f.name: self[f"loss.{f.name}"] for f in fields(LossWeights)})

    def noise(self) -> NoiseModel:
        return NoiseModel(**{f.name: self[f"noise.{f.name}"] for f in fields(NoiseModel)})

    def gripper(self) -> GripperModel:
        return GripperModel(self["gripper.open_width"], self["gripper.depth"])

    def match(self) -> PoseDistanceParams:
        return PoseDistanceParams(self["match.rho"], self["match.symmetric"])

    def thresholds(self) -> tuple[SuccessThresholds, ...]:
        return tuple(self["eval.thresholds"])

    def scene(self) -> SceneConfig:
        return SceneConfig(
            n_objects=self["scene.n_objects"],
            categories=tuple(self["scene.categories"]),
            workspace=self["scene.workspace"],
            elevation_deg=(self["scene.elevation_min"], self["scene.elevation_max"]),
            distance=(self["scene.distance_min"], self["scene.distance_max"]),
            angle_step_deg=self["scene.angle_step_deg"],
            spacing=self["scene.spacing"],
            max_grasps_per_object=self["scene.max_grasps_per_object"],
            gripper=self.gripper(),
        )

    def optim(self) -> OptimConfig:
        return OptimConfig(
            iters=self["optim.iters"],
            lr_px=self["optim.lr_px"],
            lr_logit=self["optim.lr_logit"],
            lr_map=self["optim.lr_map"],
            momentum=self["optim.momentum"],
            milestones=tuple(self["optim.milestones"]),
            fixed_mc_seed=self["optim.fixed_mc_seed"],
            precondition_px=self["optim.precondition_px"],
            clip_logit_grad=self["optim.clip_logit_grad"],
            branch_check_every=self["optim.branch_check_every"],
            max_match_dist=self["optim.max_match_dist"],
            mc=MCConfig(rounds=self["optim.mc_rounds"], k_per_round=self["optim.mc_k_per_round"],
                        dof=self["mc.dof"]),
            solver=self.solver(),
            match=self.match(),
        )


def resolve(config_path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, an optional config file, then flag overrides (``key -> value``)."""
    cfg = RunConfig()
    if config_path is not None:
        cfg.load_file(config_path)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg.set(key, value, "flag")
    return cfg

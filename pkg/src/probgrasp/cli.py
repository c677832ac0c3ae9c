"""Command-line entry point: ``probgrasp <gen|solve|train-toy|gradcheck|eval|selftest>``.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import difflib
import logging
import math
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .config import ConfigError, RunConfig, resolve
from .geometry import GeometryError, GripperModel, project
from .keypoint_codec import decode_keypoints, encode_keypoints
from .matching import distance_components
from .metrics import emit_report, evaluate, format_table
from .pnp import PnPError, multi_start_solve
from .posefile import PoseRecord, read_poses, write_poses
from .prob_pnp import ProbPnPError
from .scene import (
    CATEGORIES,
    Observation,
    SceneError,
    SceneFormatError,
    load_scene,
    observe_scene,
    sample_scene,
    save_scene,
    scene_files,
)
from .trainer import (
    ParametricPredictor,
    TrainingError,
    gt_keypoints,
    perturb_keypoints,
    single_grasp_scene,
    train_toy,
)

log = logging.getLogger("probgrasp")

DOMAIN_ERRORS = (SceneError, SceneFormatError, PnPError, ProbPnPError, ConfigError, TrainingError, GeometryError, OSError, ValueError)


class DomainError(RuntimeError):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage().rstrip()}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="root seed for all randomness")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--verbose", "-v", action="store_true", help="log progress and print the resolved config")
    p.add_argument("--out", "-o", default=None, help="output directory or path")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="probgrasp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = [_common()]

    p = sub.add_parser("gen", parents=common, help="generate synthetic scenes")
    p.add_argument("--num", type=int, default=10)
    p.add_argument("--objects", type=int, default=None)
    p.add_argument("--categories", default=None, help=f"comma list from {','.join(CATEGORIES)}")
    p.add_argument("--out-dir", dest="out_dir", default=None)

    p = sub.add_parser("solve", parents=common, help="observe scenes and recover grasp poses")
    p.add_argument("--scenes-dir", required=True)
    p.add_argument("--noise-px", type=float, default=None)
    p.add_argument("--outlier-frac", type=float, default=None)
    p.add_argument("--outlier-mag", type=float, default=None)
    p.add_argument("--encode", action="store_true", help="route keypoints through a Keypoint Map round trip")
    p.add_argument("--out-dir", dest="out_dir", default=None)

    p = sub.add_parser("train-toy", parents=common, help="train free keypoints through the probabilistic layer")
    p.add_argument("--scenes-dir", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr-px", type=float, default=None)
    p.add_argument("--lr-logit", type=float, default=None)
    p.add_argument("--lambda-kl", type=float, default=None)
    p.add_argument("--perturb-px", type=float, default=None)
    p.add_argument("--max-scenes", type=int, default=None)
    p.add_argument("--log-csv", default=None)
    p.add_argument("--out-dir", dest="out_dir", default=None)

    p = sub.add_parser("gradcheck", parents=common, help="finite-difference check of the KL gradient")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("eval", parents=common, help="success / coverage over a threshold grid")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--scenes-dir", required=True)
    p.add_argument("--thresholds", default=None, help='e.g. "1.0:10,1.5:10,2.0:20" (cm:deg)')

    sub.add_parser("selftest", parents=common, help="run the embedded example fixtures")
    return parser


def _option_strings(parser: argparse.ArgumentParser, command: str | None) -> list[str]:
    opts = []
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for name, sp in action.choices.items():
                if command is None or name == command:
                    opts += [o for a in sp._actions for o in a.option_strings]
    return opts


def _suggest(parser, argv: list[str], extras: list[str]) -> str:
    command = next((a for a in argv if not a.startswith("-")), None)
    lines = []
    flags = [t for t in extras if t.startswith("-")]
    # values that follow a mistyped flag are not worth a separate complaint
    for tok in flags or extras:
        flag = tok.split("=", 1)[0]
        if not flag.startswith("-"):
            lines.append(f"unexpected argument {tok!r}")
            continue
        close = difflib.get_close_matches(flag, _option_strings(parser, command), n=1, cutoff=0.5)
        lines.append(f"unrecognized argument {flag}" + (f" (did you mean {close[0]}?)" if close else ""))
    return "probgrasp: error: " + "; ".join(lines)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _overrides(args) -> dict:
    """Flag values that map onto config keys (None means not given)."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    ov = {
        "run.seed": get("seed"),
        "scene.n_objects": get("objects"),
        "scene.categories": get("categories"),
        "noise.sigma_px": get("noise_px"),
        "noise.outlier_fraction": get("outlier_frac"),
        "noise.outlier_magnitude": get("outlier_mag"),
        "optim.iters": get("iters"),
        "optim.lr_px": get("lr_px"),
        "optim.lr_logit": get("lr_logit"),
        "loss.lambda_KL": get("lambda_kl"),
        "optim.perturb_px": get("perturb_px"),
        "eval.thresholds": get("thresholds"),
    }
    return {k: v for k, v in ov.items() if v is not None}


def _out_dir(args, default: str) -> Path:
    out = Path(getattr(args, "out_dir", None) or args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _lock(out: Path) -> FileLock:
    lock = FileLock(str(out / ".probgrasp.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise DomainError(f"output directory {out} is in use by another process") from exc
    return lock


def _load_scenes(directory) -> list[tuple[str, object]]:
    d = Path(directory)
    if not d.is_dir():
        raise DomainError(f"scene directory {d} does not exist")
    files = scene_files(d)
    if not files:
        raise DomainError(f"no scene files (scene_*.txt) in {d}")
    return [(f.stem, load_scene(f)) for f in files]


def _errors(pose, gt, symmetric=True) -> tuple[float, float]:
    dt, ang = distance_components([pose], [gt], symmetric)
    return float(dt[0, 0]), float(ang[0, 0])


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "scenes")
    if args.num < 1:
        raise DomainError("--num must be >= 1")
    lock = _lock(out)
    try:
        seeds = np.random.default_rng(cfg.seed).integers(2**31, size=args.num)
        scfg = cfg.scene()
        total = 0
        for i, s in enumerate(seeds):
            scene = sample_scene(scfg, int(s))
            save_scene(scene, out / f"scene_{i:04d}.txt")
            total += len(scene.grasps)
        print(f"wrote {args.num} scenes ({total} grasps) to {out}")
    finally:
        lock.release()
    return 0


def _solve_observation(ob: Observation, cfg: RunConfig, rng) -> tuple:
    rep = multi_start_solve(ob.correspondences, cfg.solver(), rng)
    return rep.pose, rep.cost


def _encode_round_trip(obs: list[Observation], scene, g: GripperModel):
    """Replace observed keypoints by their Keypoint Map decode; returns (obs, scores) per decoded grasp."""
    centers = []
    for ob in obs:
        centers.append(project(scene.intrinsics, ob.target.apply(g.center)))
    kps = np.array([ob.correspondences.p2d for ob in obs]) if obs else np.zeros((0, 4, 2))
    enc = encode_keypoints(np.array(centers).reshape(-1, 2), kps, scene.intrinsics.width, scene.intrinsics.height)
    by_cell = {}
    for i, c in enumerate(enc.cells):
        if c is not None:
            by_cell[c] = i  # a later grasp in the same cell overwrites the earlier one
    out = []
    for det in decode_keypoints(enc.map):
        i = by_cell.get(det.cell)
        if i is None:
            continue
        ob = obs[i]
        X = ob.correspondences.replace(p2d=det.keypoints, w2d=np.maximum(det.weights, 0.0))
        out.append((Observation(ob.grasp_index, X, ob.target, ob.corrupted, ob.noise), det.score))
    return out


def cmd_solve(args, cfg: RunConfig) -> int:
    scenes = _load_scenes(args.scenes_dir)
    out = _out_dir(args, "poses")
    lock = _lock(out)
    g = cfg.gripper()
    noise = cfg.noise()
    failed_scenes = 0
    err_t, err_r, n_grasps, n_fail = [], [], 0, 0
    try:
        for idx, (sid, scene) in enumerate(scenes):
            rng = np.random.default_rng([cfg.seed, idx])
            try:
                obs = observe_scene(scene, noise, rng, g)
                items = _encode_round_trip(obs, scene, g) if args.encode else [
                    (ob, float(np.mean(ob.correspondences.w2d))) for ob in obs]
                records, scene_failed = [], False
                for ob, score in items:
                    n_grasps += 1
                    try:
                        pose_cam, cost = _solve_observation(ob, cfg, np.random.default_rng([cfg.seed, idx, ob.grasp_index]))
                    except PnPError as exc:
                        log.warning("%s grasp %d: %s", sid, ob.grasp_index, exc)
                        n_fail += 1
                        scene_failed = True
                        continue
                    et, er = _errors(pose_cam, ob.target, cfg["match.symmetric"])
                    err_t.append(et)
                    err_r.append(er)
                    records.append(PoseRecord(sid, ob.grasp_index, scene.camera @ pose_cam, score, cost))
                records.sort(key=lambda r: (-r.score, r.cost, r.grasp_id))
                write_poses(records, out / f"poses_{sid}.txt")
                failed_scenes += scene_failed
            except DOMAIN_ERRORS as exc:
                log.error("%s: %s", sid, exc)
                failed_scenes += 1
        lines = [
            f"scenes {len(scenes)}",
            f"grasps {n_grasps}",
            f"solve_failures {n_fail}",
            f"failed_scenes {failed_scenes}",
            f"noise_px {noise.sigma_px!r}",
            f"outlier_fraction {noise.outlier_fraction!r}",
        ]
        if err_t:
            lines += [
                f"median_translation_err_cm {100 * float(np.median(err_t))!r}",
                f"median_rotation_err_deg {math.degrees(float(np.median(err_r)))!r}",
                f"max_translation_err_m {float(np.max(err_t))!r}",
                f"max_rotation_err_rad {float(np.max(err_r))!r}",
            ]
        (out / "summary.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    finally:
        lock.release()
    return 1 if failed_scenes else 0


def cmd_train_toy(args, cfg: RunConfig) -> int:
    scenes = _load_scenes(args.scenes_dir)
    if args.max_scenes is not None:
        scenes = scenes[: args.max_scenes]
    usable = [(sid, single_grasp_scene(s)) for sid, s in scenes if s.grasps]
    if not usable:
        raise DomainError("no scene has a grasp to train on")
    out = _out_dir(args, "train")
    lock = _lock(out)
    try:
        g = cfg.gripper()
        opt = cfg.optim()
        preds = []
        for i, (_, s) in enumerate(usable):
            kp = perturb_keypoints(gt_keypoints(s, g), cfg["optim.perturb_px"], np.random.default_rng([cfg.seed, i]))
            preds.append(ParametricPredictor.from_keypoints(kp))
        report = train_toy([s for _, s in usable], cfg.loss_weights(), opt, cfg.seed, preds, g)
        report.write_csv(Path(args.log_csv) if args.log_csv else out / "train_log.csv")
        for (sid, s), p in zip(usable, report.predictors):
            recs = []
            for j, X in enumerate(p.correspondences(s, g)):
                try:
                    rep = multi_start_solve(X, opt.solver, np.random.default_rng([cfg.seed, j]))
                except PnPError:
                    continue
                recs.append(PoseRecord(sid, j, s.camera @ rep.pose, float(np.mean(p.weights[j])), rep.cost))
            write_poses(recs, out / f"poses_{sid}.txt")
        first, last = report.history[0], report.history[-1]
        print(f"scenes {len(usable)} iterations {len(report.history) - 1}")
        print(f"median pose error {first['median_pose_err_cm']:.4g} cm / {first['median_pose_err_deg']:.4g} deg"
              f" -> {last['median_pose_err_cm']:.4g} cm / {last['median_pose_err_deg']:.4g} deg")
        if report.diverged:
            raise DomainError(report.message)
    finally:
        lock.release()
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import run_gradcheck

    res = run_gradcheck(args.trials, cfg.seed, cfg.mc())
    out = _out_dir(args, "gradcheck")
    lock = _lock(out)
    try:
        res.write_csv(out / "gradcheck.csv")
    finally:
        lock.release()
    frac = res.fraction_below(args.tol)
    print(f"trials {res.trials} coordinates {res.rel_errors.size}")
    print(f"max relative error {res.max_rel:.3e}; fraction below {args.tol:g}: {frac:.4f}")
    return 0 if res.max_rel < args.tol else 1


def cmd_eval(args, cfg: RunConfig) -> int:
    scenes = _load_scenes(args.scenes_dir)
    pred_dir = Path(args.pred_dir)
    if not pred_dir.is_dir():
        raise DomainError(f"prediction directory {pred_dir} does not exist")
    by_scene: dict[str, list] = {}
    for f in sorted(pred_dir.glob("poses_*.txt")):
        for r in read_poses(f):
            by_scene.setdefault(r.scene_id, []).append(r.pose)
    preds = [by_scene.get(sid, []) for sid, _ in scenes]
    gts = [[gl.pose for gl in s.grasps] for _, s in scenes]
    report = evaluate(preds, gts, cfg.thresholds(), cfg.match())
    base = Path(args.out) if args.out else pred_dir / "report"
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = emit_report(report, base)
    print(format_table(report), end="")
    print(f"wrote {csv_path} and {txt_path}")
    return 0


def cmd_selftest(args, cfg: RunConfig) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(print) else 1


COMMANDS = {
    "gen": cmd_gen,
    "solve": cmd_solve,
    "train-toy": cmd_train_toy,
    "gradcheck": cmd_gradcheck,
    "eval": cmd_eval,
    "selftest": cmd_selftest,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        if extras:
            raise UsageError(_suggest(parser, argv, extras))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args.config, _overrides(args))
        if args.verbose:
            print(cfg.describe(), file=sys.stderr)
        return COMMANDS[args.command](args, cfg)
    except (DomainError, *DOMAIN_ERRORS) as exc:
        print(f"probgrasp {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""``evgs simulate|train|render|eval --config <path> [--set key=value ...]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
EVGS_THREADS caps the worker threads of the numeric libraries.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numba
import numpy as np
from threadpoolctl import threadpool_limits

from .camera import Intrinsics, Pose, Trajectory, pose_at
from .config import Config, ConfigError, load_config
from .events import EventFormatError, EventValidationError, read_event_file, write_event_file
from .images import read_png, write_png
from .losses import LossWeights, log_affine_align, psnr, ssim
from .plotting import plot_eval, plot_loss_curves
from .prior import load_prior_frames, naive_integrate
from .renderer import render
from .scene import GaussianScene
from .simulator import demo_scene, render_orbit, simulate_events
from .trainer import TrainInputs, TrainSettings, Trainer

log = logging.getLogger("evgs")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad input files or arguments; maps to exit code 2."""


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _frame_name(i: int) -> str:
    return f"frame_{i:04d}.png"


def _intrinsics(cfg: Config) -> Intrinsics:
    return Intrinsics.from_fov(cfg.camera.width, cfg.camera.height, cfg.camera.fov_deg)


def _load_trajectory(cfg: Config) -> tuple[Trajectory, Intrinsics]:
    path = _require_file(cfg.paths.resolve("trajectory"), "trajectory file")
    try:
        return Trajectory.load(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad trajectory file {path}: {exc}") from None


# simulate ---------------------------------------------------------------------

def cmd_simulate(cfg: Config) -> int:
    if cfg.scene.ground_truth == "demo":
        scene = demo_scene()
    else:
        scene = GaussianScene.load(_require_file(cfg.scene.ground_truth, "ground-truth scene"))
    intr = _intrinsics(cfg)
    times, frames, traj = render_orbit(scene, cfg.orbit, intr)
    stream = simulate_events(times, frames, cfg.sim, intr.width, intr.height)

    out = cfg.paths.out_dir
    frames_dir = cfg.paths.resolve("frames_dir")
    os.makedirs(frames_dir, exist_ok=True)
    for i, img in enumerate(frames):
        write_png(os.path.join(frames_dir, _frame_name(i)), img)
    events_path = cfg.paths.resolve("events")
    os.makedirs(os.path.dirname(events_path) or ".", exist_ok=True)
    write_event_file(events_path, stream)
    traj.save(cfg.paths.resolve("trajectory"), intr)
    scene.save(os.path.join(out, "ground_truth.json"))

    if len(stream) == 0:
        print(f"warning: no events; threshold {cfg.sim.threshold} exceeds every log-luminance change")
    print(f"events\t{len(stream)}\t{events_path}")
    print(f"frames\t{len(frames)}\t{frames_dir}")
    return EXIT_OK


# train ------------------------------------------------------------------------

def _train_settings(cfg: Config, out_dir: str) -> TrainSettings:
    w = cfg.weights
    return TrainSettings(
        seed=cfg.seed, n_init=cfg.scene.n_init, bounds=cfg.scene.bounds, sh_degree=cfg.scene.sh_degree,
        background=cfg.scene.background, schedule=cfg.schedule,
        weights=LossWeights(w.lambda_event, w.lambda_reg, w.log_epsilon), optimizer=cfg.optimizer,
        raster=cfg.raster, event_mode=w.event_mode, out_dir=out_dir,
    )


def _view_poses(cfg: Config, traj: Trajectory | None):
    """``[(name, pose)]`` per the views section."""
    v = cfg.views
    if v.poses is not None:
        if not v.poses:
            raise UsageError("views.poses is empty; nothing to render")
        try:
            return [(f"view_{i:04d}.png", Pose([p["qw"], p["qx"], p["qy"], p["qz"]], [p["tx"], p["ty"], p["tz"]]))
                    for i, p in enumerate(v.poses)]
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"views.poses: bad pose entry ({exc})") from None
    if traj is None:
        raise UsageError("rendering trajectory views needs a trajectory file")
    if v.times_us is not None:
        if not v.times_us:
            raise UsageError("views.times_us is empty; nothing to render")
        try:
            return [(f"t_{int(t):010d}.png", pose_at(traj, t)) for t in v.times_us]
        except ValueError as exc:
            raise UsageError(f"views.times_us: {exc}") from None
    return [(_frame_name(i), traj.poses[i]) for i in range(0, len(traj), v.stride)]


def cmd_train(cfg: Config) -> int:
    events_path = _require_file(cfg.paths.resolve("events"), "event file")
    traj, intr = _load_trajectory(cfg)
    try:
        # binary headers carry their own threshold; CSV takes it from the config
        meta = {"threshold": cfg.sim.threshold} if events_path.endswith((".csv", ".txt")) else {}
        stream = read_event_file(events_path, width=intr.width, height=intr.height, **meta)
    except (EventFormatError, EventValidationError) as exc:
        raise UsageError(f"{events_path}: {exc}") from None
    if (stream.width, stream.height) != (intr.width, intr.height):
        raise UsageError(f"event sensor {stream.width}x{stream.height} does not match "
                         f"trajectory intrinsics {intr.width}x{intr.height}")

    if cfg.prior.manifest is not None:
        try:
            priors = load_prior_frames(_require_file(cfg.prior.manifest, "prior manifest"),
                                       intr.width, intr.height)
        except (FileNotFoundError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    elif len(stream):
        priors = naive_integrate(stream, traj.times[::cfg.prior.stride], cfg.prior.half_life_us)
    else:
        priors = None

    train_dir = os.path.dirname(cfg.paths.resolve("checkpoint")) or "."
    settings = _train_settings(cfg, train_dir)
    trainer = Trainer(settings, TrainInputs(stream, traj, intr, priors))
    scene = trainer.run()
    final = cfg.paths.resolve("checkpoint")
    if os.path.abspath(final) != os.path.abspath(os.path.join(train_dir, "final.json")):
        os.replace(os.path.join(train_dir, "final.json"), final)

    views_dir = os.path.join(train_dir, "views")
    os.makedirs(views_dir, exist_ok=True)
    for name, pose in _view_poses(cfg, traj):
        write_png(os.path.join(views_dir, name), render(scene, pose, intr, cfg.raster).image)

    records = [r.to_log_record() for r in trainer.history]
    if records:
        plot_loss_curves(records, os.path.join(train_dir, "loss.png"))
    report = {"iterations": len(records), "n_gaussians": len(scene), "checkpoint": final,
              "final": records[-1] if records else None}
    with open(os.path.join(train_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    print(f"iterations\t{len(records)}")
    print(f"gaussians\t{len(scene)}")
    if records:
        print(f"final_total\t{records[-1]['total']:.6g}")
    print(f"checkpoint\t{final}")
    return EXIT_OK


# render -----------------------------------------------------------------------

def cmd_render(cfg: Config) -> int:
    ckpt = _require_file(cfg.paths.resolve("checkpoint"), "checkpoint")
    try:
        scene = GaussianScene.load(ckpt)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad checkpoint {ckpt}: {exc}") from None
    traj, intr = None, _intrinsics(cfg)
    if os.path.isfile(cfg.paths.resolve("trajectory")):
        traj, intr = _load_trajectory(cfg)
    views = _view_poses(cfg, traj)
    out = cfg.paths.resolve("rendered_dir")
    os.makedirs(out, exist_ok=True)
    for name, pose in views:
        write_png(os.path.join(out, name), render(scene, pose, intr, cfg.raster).image)
    print(f"rendered\t{len(views)}\t{out}")
    return EXIT_OK


# eval -------------------------------------------------------------------------

def eval_pairs(rendered_dir: str, reference_dir: str) -> list[str]:
    for d in (rendered_dir, reference_dir):
        if not os.path.isdir(d):
            raise UsageError(f"image directory not found: {d}")
    a = {f for f in os.listdir(rendered_dir) if f.lower().endswith(".png")}
    b = {f for f in os.listdir(reference_dir) if f.lower().endswith(".png")}
    if a != b:
        only_r = sorted(a - b)
        only_ref = sorted(b - a)
        raise UsageError(f"image sets differ: only rendered {only_r[:10]}"
                         f"{' ...' if len(only_r) > 10 else ''}, only reference {only_ref[:10]}"
                         f"{' ...' if len(only_ref) > 10 else ''}")
    if not a:
        raise UsageError(f"no PNG images in {rendered_dir}")
    return sorted(a)


def evaluate_dirs(rendered_dir: str, reference_dir: str) -> dict:
    """Per-view and mean PSNR / SSIM after per-channel log-affine alignment."""
    views = []
    for name in eval_pairs(rendered_dir, reference_dir):
        pred = read_png(os.path.join(rendered_dir, name))
        ref = read_png(os.path.join(reference_dir, name))
        if pred.shape != ref.shape:
            raise UsageError(f"{name}: size {pred.shape[:2]} vs reference {ref.shape[:2]}")
        aligned = log_affine_align(pred, ref)
        views.append({"name": name, "psnr": psnr(aligned, ref), "ssim": ssim(aligned, ref)})
    return {"views": views,
            "mean_psnr": float(np.mean([v["psnr"] for v in views])),
            "mean_ssim": float(np.mean([v["ssim"] for v in views]))}


def cmd_eval(cfg: Config) -> int:
    metrics = evaluate_dirs(cfg.paths.resolve("rendered_dir"), cfg.paths.resolve("reference_dir"))
    path = cfg.paths.resolve("metrics")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=1)
    views = metrics["views"]
    plot_eval([v["name"] for v in views], [v["psnr"] for v in views], [v["ssim"] for v in views],
              os.path.splitext(path)[0] + ".png")
    width = max(len(v["name"]) for v in views)
    print(f"{'view':<{width}}  {'psnr':>8}  {'ssim':>7}")
    for v in views:
        print(f"{v['name']:<{width}}  {v['psnr']:8.3f}  {v['ssim']:7.4f}")
    print(f"{'mean':<{width}}  {metrics['mean_psnr']:8.3f}  {metrics['mean_ssim']:7.4f}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "render": cmd_render, "eval": cmd_eval}


def thread_limit(env=None) -> int | None:
    raw = (os.environ if env is None else env).get("EVGS_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"EVGS_THREADS must be a positive integer, got {raw!r}")
    return n


HELP = {
    "simulate": "render the ground-truth orbit and write frames, trajectory and events",
    "train": "fit a Gaussian scene to an event stream (warm-up, then event phase)",
    "render": "render a checkpoint at trajectory keyframes, times or explicit poses",
    "eval": "log-affine aligned PSNR/SSIM of rendered views against references",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evgs", description="Gaussian splatting from event streams.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, what in HELP.items():
        p = sub.add_parser(name, help=what)
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. schedule.event_iters=100")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides)
        threads = thread_limit()
        if threads is None:
            return COMMANDS[args.command](cfg)
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](cfg)
    except (ConfigError, UsageError) as exc:
        print(f"evgs {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("failure", exc_info=True)
        print(f"evgs {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Standard synthetic scene and the desk-scale ablation study.

Variants differ only in how the cloud is initialized and which losses drive
the event phase; all share the seed, the event stream and the held-out views.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import Intrinsics, Trajectory, pose_at
from .events import EventStream, slice_by_count, accumulate_frame
from .losses import LossWeights, aligned_metrics, event_loss
from .prior import DEFAULT_HALF_LIFE_US, PriorFrameSet, naive_integrate
from .renderer import render
from .scene import GaussianScene
from .simulator import OrbitSpec, SimConfig, demo_scene, orbit_trajectory, render_orbit, simulate_events
from .trainer import Schedule, TrainInputs, TrainSettings, Trainer

log = logging.getLogger(__name__)

VARIANTS = ("full", "warm_up_no_reg", "no_prior", "fixed_k")


@dataclass
class SyntheticData:
    scene: GaussianScene
    intrinsics: Intrinsics
    orbit: OrbitSpec
    trajectory: Trajectory
    frame_times: np.ndarray
    frames: np.ndarray
    stream: EventStream
    priors: PriorFrameSet


def standard_synthetic(width: int = 64, height: int = 64, fov_deg: float = 40.0,
                       orbit: OrbitSpec = OrbitSpec(), sim: SimConfig = SimConfig(),
                       prior_stride: int = 4, half_life_us: float = DEFAULT_HALF_LIFE_US) -> SyntheticData:
    """Demo bars scene, 200-frame orbit, ideal events and naive priors every ``prior_stride`` frames."""
    intr = Intrinsics.from_fov(width, height, fov_deg)
    scene = demo_scene()
    times, frames, traj = render_orbit(scene, orbit, intr)
    stream = simulate_events(times, frames, sim, width, height)
    priors = naive_integrate(stream, times[::prior_stride], half_life_us)
    return SyntheticData(scene, intr, orbit, traj, times, frames, stream, priors)


def held_out_poses(orbit: OrbitSpec, n_views: int = 8):
    """Poses halfway between training views, spread evenly around the orbit."""
    step = 360.0 / orbit.n_frames
    shifted = replace(orbit, start_angle_deg=orbit.start_angle_deg + step / 2)
    poses = orbit_trajectory(shifted).poses
    return [poses[i] for i in np.linspace(0, len(poses), n_views, endpoint=False).astype(int)]


def evaluate_views(scene: GaussianScene, truth: GaussianScene, poses, intr: Intrinsics) -> dict:
    per_view = [aligned_metrics(render(scene, p, intr).image, render(truth, p, intr).image) for p in poses]
    return {"psnr": float(np.mean([m["psnr"] for m in per_view])),
            "ssim": float(np.mean([m["ssim"] for m in per_view])),
            "per_view_psnr": [m["psnr"] for m in per_view]}


def window_event_loss(scene: GaussianScene, stream: EventStream, traj: Trajectory, intr: Intrinsics,
                      k: int, eps: float = 1e-3) -> float:
    """Mean event loss over the consecutive k-event windows of the whole stream."""
    losses = []
    for t1, t2, _ in slice_by_count(stream, k):
        i1 = render(scene, pose_at(traj, t1), intr).image
        i2 = render(scene, pose_at(traj, t2), intr).image
        losses.append(event_loss(i1, i2, accumulate_frame(stream, t1, t2), eps))
    return float(np.mean(losses))


@dataclass
class AblationConfig:
    seed: int = 0
    n_init: int = 1000
    warm_up_iters: int = 600
    event_iters: int = 2400
    k_start: int = 150_000
    k_end: int = 30_000
    prior_stride: int = 4
    half_life_us: float = DEFAULT_HALF_LIFE_US
    n_eval_views: int = 8
    background: tuple = (0.0, 0.0, 0.0)
    variants: tuple = VARIANTS
    schedule_overrides: dict = field(default_factory=dict)


def variant_settings(name: str, cfg: AblationConfig) -> TrainSettings:
    sched = Schedule(warm_up_iters=cfg.warm_up_iters, event_iters=cfg.event_iters,
                     k_start=cfg.k_start, k_end=cfg.k_end, **cfg.schedule_overrides)
    weights = LossWeights()
    use_warm_up = True
    if name == "warm_up_no_reg":
        weights = LossWeights(lambda_reg=0.0)
    elif name == "no_prior":
        weights = LossWeights(lambda_reg=0.0)
        use_warm_up = False
    elif name == "fixed_k":
        sched = replace(sched, k_start=cfg.k_end)
    elif name != "full":
        raise ValueError(f"unknown ablation variant {name!r}")
    return TrainSettings(seed=cfg.seed, n_init=cfg.n_init, schedule=sched, weights=weights,
                         use_warm_up=use_warm_up, background=tuple(cfg.background))


def run_ablation(cfg: AblationConfig = AblationConfig(), data: SyntheticData | None = None) -> dict:
    """Train every variant on the same data; report held-out aligned PSNR/SSIM and event losses."""
    data = data or standard_synthetic(prior_stride=cfg.prior_stride, half_life_us=cfg.half_life_us)
    poses = held_out_poses(data.orbit, cfg.n_eval_views)
    results = {}
    for name in cfg.variants:
        t0 = time.perf_counter()
        settings = variant_settings(name, cfg)
        priors = data.priors if (settings.use_warm_up or settings.weights.lambda_reg > 0) else None
        trainer = Trainer(settings, TrainInputs(data.stream, data.trajectory, data.intrinsics, priors))
        scene = trainer.run()
        metrics = evaluate_views(scene, data.scene, poses, data.intrinsics)
        tail = [r.event_loss for r in trainer.history[-100:]]
        metrics.update(
            n_gaussians=len(scene),
            final_event_loss=window_event_loss(scene, data.stream, data.trajectory, data.intrinsics, cfg.k_end),
            train_tail_event_loss=float(np.mean(tail)) if tail else None,
            seconds=time.perf_counter() - t0,
        )
        log.info("%s: %s", name, metrics)
        results[name] = metrics
    return results

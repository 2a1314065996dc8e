"""Coarse-to-fine optimization of a Gaussian scene from events.

Stage (a) draws a random cloud, stage (b) fits it to prior intensity frames
with an L1 loss, stage (c) supervises it with count-sliced event frames whose
size k shrinks over training, regularized by SSIM against the priors.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import Intrinsics, Trajectory, pose_at
from .events import EventFrame, EventStream, InsufficientEventsError, accumulate_frame, window_bounds
from .losses import (
    LossReport,
    LossWeights,
    event_loss_grad,
    prior_l1_grad,
    reg_loss_grad,
    total_loss,
)
from .prior import PriorFrameSet
from .renderer import ParamGradients, RenderSettings, render, render_backward
from .scene import PARAM_NAMES, GaussianScene, init_random_cloud, logit, quat_to_rotmat

log = logging.getLogger(__name__)

# fixed substream ids, so each consumer of randomness is independent of the others
RNG_STREAMS = {"init": 1, "warm_up": 2, "windows": 3, "densify": 4}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, RNG_STREAMS[name]])


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Schedule:
    warm_up_iters: int = 3000
    event_iters: int = 15000
    k_start: int = 150_000
    k_end: int = 30_000
    k_shape: str = "linear"
    densify_interval: int = 100
    densify_until: float = 0.5
    densify_in_warm_up: bool = True
    opacity_prune_threshold: float = 0.005
    positional_grad_threshold: float = 0.0002
    percent_dense: float = 0.01
    checkpoint_interval: int = 1000

    def __post_init__(self) -> None:
        if not self.k_start >= self.k_end >= 1:
            raise ValueError(f"need k_start >= k_end >= 1, got {self.k_start} -> {self.k_end}")
        if self.k_shape not in ("linear", "geometric"):
            raise ValueError(f"k_shape must be 'linear' or 'geometric', got {self.k_shape!r}")
        if self.warm_up_iters < 0 or self.event_iters < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.densify_interval <= 0 or self.checkpoint_interval <= 0:
            raise ValueError("intervals must be positive")


@dataclass(frozen=True)
class OptimizerConfig:
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    spatial_lr_scale: float | None = None  # None: extent of the init bounds

    def base_rates(self) -> dict[str, float]:
        return {"positions": self.lr_position, "log_scales": self.lr_scale,
                "rotations": self.lr_rotation, "opacity_logits": self.lr_opacity,
                "sh": self.lr_color}


class Adam:
    """Adam with one learning rate per parameter class and per-row moments."""

    def __init__(self, scene: GaussianScene, config: OptimizerConfig = OptimizerConfig()):
        self.config = config
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in scene.params().items()}
        self.v = {k: np.zeros_like(v) for k, v in scene.params().items()}

    def step(self, scene: GaussianScene, grads: ParamGradients, rates: dict[str, float]) -> None:
        c = self.config
        self.step_count += 1
        b1t = 1.0 - c.beta1 ** self.step_count
        b2t = 1.0 - c.beta2 ** self.step_count
        for name, g in grads.params().items():
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = rates[name] * (m / b1t) / (np.sqrt(v / b2t) + c.eps)
            setattr(scene, name, getattr(scene, name) - update)
        scene.normalize_rotations()

    def select(self, index) -> None:
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k][index]

    def append_zeros(self, n: int) -> None:
        for d in (self.m, self.v):
            for k in d:
                d[k] = np.concatenate([d[k], np.zeros((n,) + d[k].shape[1:])])


def position_lr(config: OptimizerConfig, step: int, total: int, spatial_scale: float) -> float:
    """Exponential decay from the initial to the final position rate over ``total`` steps."""
    u = min(max(step / max(total, 1), 0.0), 1.0)
    lr = np.exp((1 - u) * np.log(config.lr_position) + u * np.log(config.lr_position_final))
    return float(lr) * spatial_scale


def progressive_k(iteration: int, schedule: Schedule) -> int:
    """Window size in events at an event-phase iteration; k_start at 0, k_end at the last."""
    n = schedule.event_iters
    if not 0 <= iteration < n:
        raise ValueError(f"iteration {iteration} outside [0, {n})")
    u = iteration / (n - 1) if n > 1 else 1.0
    if schedule.k_shape == "geometric":
        k = schedule.k_start * (schedule.k_end / schedule.k_start) ** u
    else:
        k = schedule.k_start + u * (schedule.k_end - schedule.k_start)
    return int(np.floor(k + 0.5))


def sample_event_window(stream: EventStream, k: int, rng: np.random.Generator) -> tuple[int, int, EventFrame]:
    """A uniformly random run of exactly ``k`` consecutive events and its event frame."""
    if k <= 0:
        raise ValueError(f"window size must be positive, got {k}")
    if len(stream) < k:
        raise InsufficientEventsError(f"stream has {len(stream)} events, window needs {k}")
    start = int(rng.integers(0, len(stream) - k + 1))
    t1, t2 = window_bounds(stream, start, start + k)
    return t1, t2, accumulate_frame(stream, t1, t2)


@dataclass
class DensifyStats:
    """Running sums of the NDC-space positional gradient norm per Gaussian."""

    grad_sum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> DensifyStats:
        return cls(np.zeros(n), np.zeros(n))

    def add(self, grads: ParamGradients, intr: Intrinsics) -> None:
        g = grads.mean2d * np.array([0.5 * intr.width, 0.5 * intr.height])
        vis = grads.visible
        self.grad_sum[vis] += np.linalg.norm(g[vis], axis=1)
        self.count[vis] += 1

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.grad_sum / np.maximum(self.count, 1), 0.0)


@dataclass
class StepContext:
    """Everything a step needs besides the scene and the optimizer."""

    trajectory: Trajectory
    intrinsics: Intrinsics
    weights: LossWeights = field(default_factory=LossWeights)
    event_mode: str = "luminance"
    raster: RenderSettings = field(default_factory=RenderSettings)
    rates: dict = field(default_factory=dict)
    stats: DensifyStats | None = None

    def view(self, scene: GaussianScene, t: float):
        pose = pose_at(self.trajectory, t)
        return pose, render(scene, pose, self.intrinsics, self.raster)

    def backward(self, scene, pose, result, grad_image) -> ParamGradients:
        g = render_backward(scene, pose, self.intrinsics, result, grad_image)
        if self.stats is not None:
            self.stats.add(g, self.intrinsics)
        return g


def training_step(scene: GaussianScene, optimizer: Adam, window, priors: PriorFrameSet | None,
                  ctx: StepContext, iteration: int = 0) -> tuple[GaussianScene, LossReport]:
    """One event-phase update: event loss between renders at t1 and t2, plus SSIM to the nearest prior."""
    t1, t2, frame = window
    w = ctx.weights
    pose1, r1 = ctx.view(scene, t1)
    pose2, r2 = ctx.view(scene, t2)
    ev, g1, g2 = event_loss_grad(r1.image, r2.image, frame, w.log_epsilon, ctx.event_mode)
    reg = 0.0
    grads = None
    if priors is not None and len(priors) and w.lambda_reg > 0:
        j = priors.nearest(t2)
        t_prior = min(max(priors.times[j], ctx.trajectory.t_min), ctx.trajectory.t_max)
        pose3, r3 = ctx.view(scene, t_prior)
        reg, g3 = reg_loss_grad(priors.images[j], r3.image)
        grads = ctx.backward(scene, pose3, r3, w.lambda_reg * g3)
    report = LossReport(iteration, event_loss=ev, reg_loss=reg, total=total_loss(ev, reg, w))
    if not np.isfinite(report.total):
        log.warning("iteration %d: non-finite loss, update skipped", iteration)
        return scene, report
    if w.lambda_event > 0:
        g_ev = (ctx.backward(scene, pose1, r1, w.lambda_event * g1)
                + ctx.backward(scene, pose2, r2, w.lambda_event * g2))
        grads = g_ev if grads is None else grads + g_ev
    if grads is None:
        grads = ParamGradients.zeros_like(scene)
    optimizer.step(scene, grads, ctx.rates)
    return scene, report


def warm_up_step(scene: GaussianScene, optimizer: Adam, priors: PriorFrameSet, index: int,
                 ctx: StepContext, iteration: int = 0) -> tuple[GaussianScene, LossReport]:
    t = min(max(priors.times[index], ctx.trajectory.t_min), ctx.trajectory.t_max)
    pose, r = ctx.view(scene, t)
    l1, g = prior_l1_grad(priors.images[index], r.image)
    optimizer.step(scene, ctx.backward(scene, pose, r, g), ctx.rates)
    return scene, LossReport(iteration, prior_l1=l1, total=l1)


def densify_and_prune(scene: GaussianScene, mean_grad: np.ndarray, schedule: Schedule,
                      extent: float, rng: np.random.Generator, optimizer: Adam | None = None) -> GaussianScene:
    """Clone small / split large high-gradient Gaussians, then drop nearly transparent ones."""
    n = len(scene)
    selected = mean_grad >= schedule.positional_grad_threshold
    big = scene.scales.max(axis=1) > schedule.percent_dense * extent
    clone = np.flatnonzero(selected & ~big)
    split = np.flatnonzero(selected & big)

    parts = [scene.select(np.arange(n)), scene.select(clone)]
    if split.size:
        children = scene.select(np.repeat(split, 2))
        rot = quat_to_rotmat(children.rotations)
        offsets = rng.standard_normal((len(children), 3)) * children.scales
        children.positions = children.positions + np.einsum("nij,nj->ni", rot, offsets)
        children.log_scales = children.log_scales + np.log(0.8)
        parts.append(children)
    keep_old = np.ones(n, dtype=bool)
    keep_old[split] = False

    grown = GaussianScene(
        **{k: np.concatenate([getattr(p, k) for p in parts]) for k in PARAM_NAMES},
        background=scene.background, sh_degree=scene.sh_degree,
    )
    if optimizer is not None:
        optimizer.append_zeros(len(grown) - n)
    keep = np.concatenate([keep_old, np.ones(len(grown) - n, dtype=bool)])
    keep &= grown.opacities >= schedule.opacity_prune_threshold
    if optimizer is not None:
        optimizer.select(keep)
    return grown.select(keep)


@dataclass
class TrainInputs:
    stream: EventStream | None
    trajectory: Trajectory
    intrinsics: Intrinsics
    priors: PriorFrameSet | None = None


@dataclass
class TrainSettings:
    seed: int = 0
    n_init: int = 10_000
    bounds: tuple = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))
    sh_degree: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    schedule: Schedule = field(default_factory=Schedule)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    raster: RenderSettings = field(default_factory=RenderSettings)
    event_mode: str = "luminance"
    use_warm_up: bool = True
    out_dir: str | None = None


class Trainer:
    """Runs the three stages and owns the scene, optimizer, RNG streams and logs."""

    def __init__(self, settings: TrainSettings, inputs: TrainInputs, scene: GaussianScene | None = None):
        self.s = settings
        self.inputs = inputs
        lo, hi = (np.asarray(b, dtype=float) for b in settings.bounds)
        self.extent = float(np.linalg.norm(hi - lo) / 2)
        if scene is None:
            scene = init_random_cloud(settings.n_init, settings.bounds, rng_stream(settings.seed, "init"),
                                      sh_degree=settings.sh_degree, background=settings.background)
        self.scene = scene
        self.optimizer = Adam(scene, settings.optimizer)
        self.spatial_scale = (settings.optimizer.spatial_lr_scale
                              if settings.optimizer.spatial_lr_scale is not None else self.extent)
        self.window_rng = rng_stream(settings.seed, "windows")
        self.warm_rng = rng_stream(settings.seed, "warm_up")
        self.densify_rng = rng_stream(settings.seed, "densify")
        self.global_iter = 0
        self.history: list[LossReport] = []
        self._log_fh = None
        if settings.out_dir:
            os.makedirs(settings.out_dir, exist_ok=True)
            self._log_fh = open(os.path.join(settings.out_dir, "train_log.jsonl"), "w")

    @property
    def total_iters(self) -> int:
        sch = self.s.schedule
        return (sch.warm_up_iters if self.s.use_warm_up else 0) + sch.event_iters

    def _context(self, stats: DensifyStats) -> StepContext:
        rates = self.s.optimizer.base_rates()
        rates["positions"] = position_lr(self.s.optimizer, self.global_iter, self.total_iters,
                                         self.spatial_scale)
        return StepContext(self.inputs.trajectory, self.inputs.intrinsics, self.s.weights,
                           self.s.event_mode, self.s.raster, rates, stats)

    def _record(self, report: LossReport) -> None:
        self.history.append(report)
        if self._log_fh is not None:
            self._log_fh.write(json.dumps(report.to_log_record()) + "\n")
        self.global_iter += 1
        if self.s.out_dir and self.global_iter % self.s.schedule.checkpoint_interval == 0:
            self.checkpoint(f"ckpt_{self.global_iter:06d}.json")

    def checkpoint(self, name: str) -> str:
        path = os.path.join(self.s.out_dir, name)
        tmp = path + ".tmp"
        self.scene.save(tmp)
        os.replace(tmp, path)
        return path

    def _maybe_densify(self, it: int, phase_iters: int, stats: DensifyStats) -> DensifyStats:
        sch = self.s.schedule
        if it == 0 or it % sch.densify_interval or it >= sch.densify_until * phase_iters:
            return stats
        self.scene = densify_and_prune(self.scene, stats.mean(), sch, self.extent,
                                       self.densify_rng, self.optimizer)
        if len(self.scene) == 0:
            raise TrainingError(f"iteration {self.global_iter}: every Gaussian was pruned")
        return DensifyStats.zeros(len(self.scene))

    def warm_up(self, priors: PriorFrameSet, iters: int | None = None) -> GaussianScene:
        iters = self.s.schedule.warm_up_iters if iters is None else iters
        if iters and (priors is None or not len(priors)):
            raise ValueError("warm-up needs at least one prior frame")
        stats = DensifyStats.zeros(len(self.scene))
        for it in range(iters):
            if self.s.schedule.densify_in_warm_up:
                stats = self._maybe_densify(it, iters, stats)
            index = int(self.warm_rng.integers(len(priors)))
            _, report = warm_up_step(self.scene, self.optimizer, priors, index,
                                     self._context(stats), self.global_iter)
            self._record(report)
        return self.scene

    def event_phase(self, stream: EventStream, priors: PriorFrameSet | None) -> GaussianScene:
        sch = self.s.schedule
        if sch.event_iters and not len(stream):
            raise InsufficientEventsError("event phase needs a nonempty stream")
        stats = DensifyStats.zeros(len(self.scene))
        for it in range(sch.event_iters):
            stats = self._maybe_densify(it, sch.event_iters, stats)
            k = min(progressive_k(it, sch), len(stream))
            window = sample_event_window(stream, k, self.window_rng)
            _, report = training_step(self.scene, self.optimizer, window, priors,
                                      self._context(stats), self.global_iter)
            self._record(report)
        return self.scene

    def run(self) -> GaussianScene:
        try:
            if self.s.use_warm_up:
                self.warm_up(self.inputs.priors)
            if self.s.schedule.event_iters:
                self.event_phase(self.inputs.stream, self.inputs.priors)
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
        if self.s.out_dir:
            self.checkpoint("final.json")
        return self.scene


def warm_up(scene: GaussianScene, priors: PriorFrameSet, trajectory: Trajectory, intrinsics: Intrinsics,
            iters: int = 3000, settings: TrainSettings | None = None) -> GaussianScene:
    """Fit ``scene`` (in place) to the prior frames with the L1 loss for ``iters`` steps."""
    if iters == 0:
        return scene
    settings = settings or TrainSettings()
    trainer = Trainer(settings, TrainInputs(None, trajectory, intrinsics, priors), scene=scene)
    return trainer.warm_up(priors, iters)


def train(settings: TrainSettings, inputs: TrainInputs) -> tuple[GaussianScene, dict]:
    """Random init, optional warm-up on priors, then progressive event supervision."""
    trainer = Trainer(settings, inputs)
    scene = trainer.run()
    hist = trainer.history
    report = {
        "iterations": len(hist),
        "n_gaussians": len(scene),
        "final_event_loss": hist[-1].event_loss if hist else None,
        "final_total": hist[-1].total if hist else None,
    }
    return scene, report


__all__ = [
    "Adam", "DensifyStats", "OptimizerConfig", "Schedule", "StepContext", "TrainInputs",
    "TrainSettings", "Trainer", "TrainingError", "densify_and_prune", "logit", "position_lr",
    "progressive_k", "rng_stream", "sample_event_window", "train", "training_step", "warm_up",
    "warm_up_step",
]

"""Gaussian splatting trained from event-camera streams, with intensity priors for warm-up."""

from .camera import Intrinsics, Pose, Trajectory, pose_at
from .events import EventFrame, EventStream, accumulate_frame, read_event_file, slice_by_count
from .losses import LossWeights, event_loss, log_affine_align, psnr, ssim
from .prior import PriorFrameSet, load_prior_frames, naive_integrate
from .renderer import render, render_backward
from .scene import GaussianScene, init_random_cloud
from .simulator import OrbitSpec, SimConfig, demo_scene, render_orbit, simulate_events
from .trainer import Schedule, progressive_k, train

__version__ = "0.1.0"

__all__ = [
    "EventFrame", "EventStream", "GaussianScene", "Intrinsics", "LossWeights", "OrbitSpec", "Pose",
    "PriorFrameSet", "Schedule", "SimConfig", "Trajectory", "accumulate_frame", "demo_scene",
    "event_loss", "init_random_cloud", "load_prior_frames", "log_affine_align", "naive_integrate",
    "pose_at", "progressive_k", "psnr", "read_event_file", "render", "render_backward",
    "render_orbit", "simulate_events", "slice_by_count", "ssim", "train",
]

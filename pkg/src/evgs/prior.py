"""Prior intensity frames for warm-up and regularization.

Frames either come from an external event-to-video reconstruction (a JSON
manifest of PNGs) or from a leaky per-pixel log integrator over the events.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .events import EventStream
from .images import read_png, write_png

REST_LEVEL = 0.5
DEFAULT_HALF_LIFE_US = 200_000.0


@dataclass(frozen=True)
class PriorFrameSet:
    times: np.ndarray   # (F,) int microseconds, strictly increasing
    images: np.ndarray  # (F, H, W, 3) in [0, 1]
    source: str         # "external" or "naive"

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=np.int64)
        images = np.asarray(self.images, dtype=float)
        if images.ndim != 4 or len(images) != len(times):
            raise ValueError("need one (H, W, 3) image per timestamp")
        if np.any(np.diff(times) <= 0):
            raise ValueError("prior frame timestamps must be strictly increasing")
        if self.source not in ("external", "naive"):
            raise ValueError(f"unknown prior source {self.source!r}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "images", images)

    def __len__(self) -> int:
        return len(self.times)

    def nearest(self, t: float) -> int:
        """Index of the frame closest in time to ``t`` (earlier frame on ties)."""
        i = int(np.searchsorted(self.times, t))
        if i == 0:
            return 0
        if i == len(self.times):
            return i - 1
        return i - 1 if t - self.times[i - 1] <= self.times[i] - t else i

    def save(self, directory, stem: str = "prior") -> str:
        """Write PNGs plus a manifest into ``directory``; returns the manifest path."""
        os.makedirs(directory, exist_ok=True)
        frames = []
        for k, (t, img) in enumerate(zip(self.times, self.images)):
            name = f"{stem}_{k:05d}.png"
            write_png(os.path.join(directory, name), img)
            frames.append({"t_us": int(t), "path": name})
        manifest = os.path.join(directory, f"{stem}_manifest.json")
        with open(manifest, "w") as fh:
            json.dump({"frames": frames}, fh, indent=1)
        return manifest


def load_prior_frames(manifest_path, width: int | None = None, height: int | None = None) -> PriorFrameSet:
    """Load frames listed in a manifest; relative image paths resolve against the manifest's folder."""
    with open(manifest_path) as fh:
        entries = json.load(fh)["frames"]
    base = os.path.dirname(os.path.abspath(manifest_path))
    times, images = [], []
    for k, entry in enumerate(entries):
        path = entry["path"]
        path = path if os.path.isabs(path) else os.path.join(base, path)
        if not os.path.exists(path):
            raise FileNotFoundError(f"prior frame {k}: missing image {path}")
        img = read_png(path)
        if width is not None and height is not None and img.shape[:2] != (height, width):
            raise ValueError(
                f"prior frame {k}: resolution {img.shape[1]}x{img.shape[0]} != sensor {width}x{height}")
        if images and img.shape != images[0].shape:
            raise ValueError(f"prior frame {k}: resolution differs from frame 0")
        t = int(entry["t_us"])
        if times and t <= times[-1]:
            raise ValueError(f"prior frame {k}: timestamp {t} not after {times[-1]}")
        times.append(t)
        images.append(img)
    if not times:
        raise ValueError("prior manifest lists no frames")
    return PriorFrameSet(np.array(times), np.stack(images), "external")


def naive_log_states(stream: EventStream, timestamps, half_life_us: float = DEFAULT_HALF_LIFE_US) -> np.ndarray:
    """Unclamped per-pixel log intensity at each timestamp, shape (F, H, W).

    Each event adds ``p * threshold``; the deviation from ``log(0.5)`` decays with
    the given half-life (``inf`` disables decay). Events at exactly a requested
    timestamp are included in that frame.
    """
    ts = np.asarray(timestamps, dtype=np.int64)
    if ts.size == 0:
        raise ValueError("no frame timestamps requested")
    if np.any(np.diff(ts) < 0):
        raise ValueError("frame timestamps must be nondecreasing")
    h, w = stream.height, stream.width
    rate = 0.0 if np.isinf(half_life_us) else np.log(2.0) / half_life_us
    dev = np.zeros(h * w)
    out = np.empty((ts.size, h, w))
    flat = stream.y * w + stream.x
    lo = int(np.searchsorted(stream.t, ts[0], side="right"))
    t_prev = ts[0]
    # events up to the first frame, decayed to the first frame time
    np.add.at(dev, flat[:lo], stream.p[:lo] * stream.threshold * np.exp(-rate * (ts[0] - stream.t[:lo])))
    out[0] = dev.reshape(h, w)
    for f in range(1, ts.size):
        hi = int(np.searchsorted(stream.t, ts[f], side="right"))
        dev *= np.exp(-rate * (ts[f] - t_prev))
        if hi > lo:
            contrib = stream.p[lo:hi] * stream.threshold * np.exp(-rate * (ts[f] - stream.t[lo:hi]))
            dev += np.bincount(flat[lo:hi], weights=contrib, minlength=h * w)
        out[f] = dev.reshape(h, w)
        lo, t_prev = hi, ts[f]
    return out + np.log(REST_LEVEL)


def naive_integrate(stream: EventStream, timestamps, half_life_us: float = DEFAULT_HALF_LIFE_US) -> PriorFrameSet:
    """Stand-in prior frames from a leaky log integrator, clamped to [0, 1] and gray-expanded."""
    ts = np.asarray(timestamps, dtype=np.int64)
    if ts.size == 0:
        raise ValueError("no frame timestamps requested")
    frames = np.clip(np.exp(naive_log_states(stream, ts, half_life_us)), 0.0, 1.0)
    return PriorFrameSet(ts, np.repeat(frames[..., None], 3, axis=3), "naive")

"""One JSON-serializable configuration for every subcommand.

Sections reuse the modules' own parameter records where they exist, so a field's
default lives in exactly one place.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field

from .losses import LossWeights
from .prior import DEFAULT_HALF_LIFE_US
from .renderer import RenderSettings
from .simulator import OrbitSpec, SimConfig
from .trainer import OptimizerConfig, Schedule


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass(frozen=True)
class SceneSection:
    n_init: int = 10_000
    bounds: tuple = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))
    sh_degree: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    ground_truth: str = "demo"  # "demo" or a scene checkpoint path, used by simulate

    def __post_init__(self) -> None:
        if self.n_init < 1:
            raise ValueError("n_init must be at least 1")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError(f"sh_degree must be in 0..3, got {self.sh_degree}")
        if len(self.bounds) != 2 or any(len(b) != 3 for b in self.bounds):
            raise ValueError("bounds must be [[xmin, ymin, zmin], [xmax, ymax, zmax]]")
        if any(lo >= hi for lo, hi in zip(*self.bounds)):
            raise ValueError("bounds min must be below max on every axis")


@dataclass(frozen=True)
class CameraSection:
    width: int = 64
    height: int = 64
    fov_deg: float = 40.0

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be positive")
        if not 0 < self.fov_deg < 180:
            raise ValueError("fov_deg must be in (0, 180)")


@dataclass(frozen=True)
class PriorSection:
    manifest: str | None = None  # None: naive integration of the events
    stride: int = 4              # naive priors at every stride-th trajectory keyframe
    half_life_us: float = DEFAULT_HALF_LIFE_US

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ValueError("stride must be at least 1")
        if not self.half_life_us > 0:
            raise ValueError("half_life_us must be positive")


@dataclass(frozen=True)
class WeightsSection(LossWeights):
    event_mode: str = "luminance"

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.event_mode not in ("luminance", "rgb"):
            raise ValueError(f"event_mode must be 'luminance' or 'rgb', got {self.event_mode!r}")


@dataclass(frozen=True)
class PathsSection:
    out_dir: str = "evgs_run"
    events: str | None = None        # default <out_dir>/events.bin
    trajectory: str | None = None    # default <out_dir>/trajectory.json
    frames_dir: str | None = None    # default <out_dir>/frames
    checkpoint: str | None = None    # default <out_dir>/train/final.json
    rendered_dir: str | None = None  # default <out_dir>/renders
    reference_dir: str | None = None  # default frames_dir
    metrics: str | None = None       # default <out_dir>/metrics.json

    def resolve(self, name: str) -> str:
        value = getattr(self, name)
        if value is not None:
            return value
        if name == "reference_dir":
            return self.resolve("frames_dir")
        defaults = {"events": "events.bin", "trajectory": "trajectory.json", "frames_dir": "frames",
                    "checkpoint": os.path.join("train", "final.json"), "rendered_dir": "renders",
                    "metrics": "metrics.json"}
        return os.path.join(self.out_dir, defaults[name])


@dataclass(frozen=True)
class ViewsSection:
    """Which poses render uses: explicit poses, else trajectory times, else every stride-th keyframe."""

    poses: list | None = None   # [{"qw","qx","qy","qz","tx","ty","tz"}, ...] world-to-camera
    times_us: list | None = None
    stride: int = 25

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ValueError("stride must be at least 1")


@dataclass(frozen=True)
class Config:
    seed: int = 0
    scene: SceneSection = field(default_factory=SceneSection)
    camera: CameraSection = field(default_factory=CameraSection)
    orbit: OrbitSpec = field(default_factory=OrbitSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    prior: PriorSection = field(default_factory=PriorSection)
    weights: WeightsSection = field(default_factory=WeightsSection)
    schedule: Schedule = field(default_factory=Schedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    raster: RenderSettings = field(default_factory=RenderSettings)
    paths: PathsSection = field(default_factory=PathsSection)
    views: ViewsSection = field(default_factory=ViewsSection)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _to_tuple(v):
    return tuple(_to_tuple(x) for x in v) if isinstance(v, list) else v


def _check_type(key: str, value, hint):
    """Return ``value`` coerced to ``hint`` or raise a ConfigError naming ``key``."""
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _check_type(key, value, arg)
            except ConfigError:
                pass
        raise ConfigError(key, f"expected {hint}, got {type(value).__name__}")
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    elif hint in (tuple, list) or origin in (tuple, list):
        if isinstance(value, (list, tuple)):
            return _to_tuple(list(value)) if (hint is tuple or origin is tuple) else list(value)
    elif dataclasses.is_dataclass(hint):
        if isinstance(value, dict):
            return _build(hint, value, key)
    else:
        return value
    name = getattr(hint, "__name__", str(hint))
    raise ConfigError(key, f"expected {name}, got {type(value).__name__} {value!r}")


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        key = f"{prefix}.{k}" if prefix else k
        if k not in names:
            raise ConfigError(key, "unknown key")
        kwargs[k] = _check_type(key, v, hints[k])
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        # point at the field the record's own validation complained about
        msg = str(exc)
        named = [n for n in sorted(names, key=len, reverse=True) if n in msg]
        key = f"{prefix}.{named[0]}" if named and prefix else (prefix or "config")
        raise ConfigError(key, msg) from None


def config_from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    # cross-field checks first so they name the field rather than the section
    sched = data.get("schedule")
    if isinstance(sched, dict):
        k_start = sched.get("k_start", Schedule.k_start)
        k_end = sched.get("k_end", Schedule.k_end)
        if isinstance(k_start, int) and isinstance(k_end, int) and k_end > k_start:
            raise ConfigError("schedule.k_end", f"{k_end} exceeds schedule.k_start {k_start}")
    return _build(Config, data)


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value``; the value is parsed as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(key, "malformed override key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    data = json.loads(json.dumps(data))
    for text in overrides or ():
        parts, value = parse_override(text)
        node = data
        for depth, part in enumerate(parts[:-1]):
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(".".join(parts[:depth + 1]), "is not a section")
            node = nxt
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=()) -> Config:
    """Read a JSON config (or start empty), apply ``--set`` overrides, validate."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError("--config", f"no such file {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"{path} is not valid JSON ({exc})") from None
    return config_from_dict(apply_overrides(data, overrides))

"""Pinhole cameras, world-to-camera poses and pose trajectories.

Camera frame: x right, y down, z forward. A pose maps world points into the
camera frame as ``R @ p + t``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .scene import quat_to_rotmat

DEFAULT_NEAR = 0.01


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> Intrinsics:
        f = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


def quat_from_rotmat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 for a rotation matrix."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray     # unit quaternion (w, x, y, z)
    translation: np.ndarray  # (3,)

    def __post_init__(self) -> None:
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if n == 0:
            raise ValueError("zero quaternion")
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, r: np.ndarray, t) -> Pose:
        return cls(quat_from_rotmat(r), t)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def camera_center(self) -> np.ndarray:
        return -self.matrix.T @ self.translation

    def compose(self, inner: Pose) -> Pose:
        """The pose applying ``inner`` first, then ``self``."""
        r = self.matrix
        return Pose.from_matrix(r @ inner.matrix, r @ inner.translation + self.translation)


def world_to_camera(pose: Pose, points, near: float = 0.0):
    """Camera-frame coordinates of world points and a behind-camera flag (z <= near)."""
    pts = np.asarray(points, dtype=float)
    cam = pts @ pose.matrix.T + pose.translation
    return cam, cam[..., 2] <= near


def project_points(cam_points, intr: Intrinsics) -> np.ndarray:
    """Continuous pixel coordinates; pixel (i, j) has its center at (i + 0.5, j + 0.5)."""
    p = np.asarray(cam_points, dtype=float)
    return np.stack([intr.fx * p[..., 0] / p[..., 2] + intr.cx,
                     intr.fy * p[..., 1] / p[..., 2] + intr.cy], axis=-1)


def projection_jacobian(cam_point, intr: Intrinsics, near: float = DEFAULT_NEAR) -> np.ndarray:
    """2x3 Jacobian of the pixel projection at a camera-frame point."""
    x, y, z = np.asarray(cam_point, dtype=float)
    if z <= near:
        raise BehindCameraError(f"point depth {z} is not beyond the near plane {near}")
    return np.array([[intr.fx / z, 0.0, -intr.fx * x / z ** 2],
                     [0.0, intr.fy / z, -intr.fy * y / z ** 2]])


def slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    dot = float(np.dot(q0, q1))
    if dot < 0:
        q1, dot = -q1, -dot
    if dot > 1 - 1e-12:
        q = q0 + u * (q1 - q0)
    else:
        theta = np.arccos(min(dot, 1.0))
        q = (np.sin((1 - u) * theta) * q0 + np.sin(u * theta) * q1) / np.sin(theta)
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray  # (M,) int microseconds, strictly increasing
    poses: tuple

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=np.int64)
        if times.size < 2 or len(self.poses) != times.size:
            raise ValueError("a trajectory needs at least 2 keyframes, one pose each")
        if np.any(np.diff(times) <= 0):
            raise ValueError("keyframe timestamps must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def t_min(self) -> int:
        return int(self.times[0])

    @property
    def t_max(self) -> int:
        return int(self.times[-1])

    def to_json(self, intr: Intrinsics) -> str:
        frames = []
        for t, p in zip(self.times, self.poses):
            qw, qx, qy, qz = p.rotation.tolist()
            tx, ty, tz = p.translation.tolist()
            frames.append({"t_us": int(t), "qw": qw, "qx": qx, "qy": qy, "qz": qz,
                           "tx": tx, "ty": ty, "tz": tz})
        return json.dumps({"convention": "w2c", "intrinsics": intr.to_dict(), "keyframes": frames},
                          indent=1)

    @staticmethod
    def from_json(text: str) -> tuple[Trajectory, Intrinsics]:
        d = json.loads(text)
        if d.get("convention") != "w2c":
            raise ValueError(f"unsupported pose convention {d.get('convention')!r}")
        intr = Intrinsics(**d["intrinsics"])
        kf = d["keyframes"]
        poses = [Pose([f["qw"], f["qx"], f["qy"], f["qz"]], [f["tx"], f["ty"], f["tz"]]) for f in kf]
        return Trajectory([f["t_us"] for f in kf], poses), intr

    def save(self, path, intr: Intrinsics) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json(intr))

    @staticmethod
    def load(path) -> tuple[Trajectory, Intrinsics]:
        with open(path) as fh:
            return Trajectory.from_json(fh.read())


def pose_at(traj: Trajectory, t: float) -> Pose:
    """Pose at time ``t`` by slerp / linear interpolation between bracketing keyframes."""
    if not traj.t_min <= t <= traj.t_max:
        raise ValueError(f"time {t} outside trajectory range [{traj.t_min}, {traj.t_max}]")
    i = int(np.searchsorted(traj.times, t, side="right")) - 1
    if traj.times[i] == t or i == len(traj) - 1:
        return traj.poses[i]
    a, b = traj.poses[i], traj.poses[i + 1]
    u = (t - traj.times[i]) / (traj.times[i + 1] - traj.times[i])
    return Pose(slerp(a.rotation, b.rotation, u), (1 - u) * a.translation + u * b.translation)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose at ``eye`` looking at ``target`` (+z forward, y down)."""
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    r = np.stack([right, down, forward])
    return Pose.from_matrix(r, -r @ eye)

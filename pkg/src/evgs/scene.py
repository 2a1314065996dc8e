"""Explicit 3D Gaussian scene representation.

Parameters are stored unconstrained (log scales, opacity logits, raw quaternions)
and squashed on use. Each forward helper here has a matching vector-Jacobian
helper used by the renderer's backward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "sh")


def sh_count(degree: int) -> int:
    if not 0 <= degree <= 3:
        raise ValueError(f"SH degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian:
    """A single Gaussian, as read out of a scene."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color_coeffs: np.ndarray  # (K, 3)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class GaussianScene:
    positions: np.ndarray        # (N, 3)
    log_scales: np.ndarray       # (N, 3)
    rotations: np.ndarray        # (N, 4) quaternion (w, x, y, z)
    opacity_logits: np.ndarray   # (N,)
    sh: np.ndarray               # (N, K, 3)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sh_degree: int = 0

    def __post_init__(self) -> None:
        n = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=float).reshape(n, 3)
        self.log_scales = np.asarray(self.log_scales, dtype=float).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=float).reshape(n)
        self.sh = np.asarray(self.sh, dtype=float).reshape(n, sh_count(self.sh_degree), 3)
        self.background = np.asarray(self.background, dtype=float).reshape(3)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i].copy(), self.log_scales[i].copy(),
                        self.rotations[i].copy(), float(self.opacity_logits[i]),
                        self.sh[i].copy())

    @classmethod
    def from_gaussians(cls, gaussians, background=(0.0, 0.0, 0.0), sh_degree: int = 0) -> GaussianScene:
        gaussians = list(gaussians)
        k = sh_count(sh_degree)
        return cls(
            positions=[g.position for g in gaussians],
            log_scales=[g.log_scale for g in gaussians],
            rotations=[g.rotation for g in gaussians],
            opacity_logits=[g.opacity_logit for g in gaussians],
            sh=np.array([g.color_coeffs for g in gaussians]).reshape(len(gaussians), k, 3),
            background=background,
            sh_degree=sh_degree,
        )

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> GaussianScene:
        return GaussianScene(**{k: v.copy() for k, v in self.params().items()},
                             background=self.background.copy(), sh_degree=self.sh_degree)

    def select(self, mask_or_index) -> GaussianScene:
        return GaussianScene(**{k: v[mask_or_index].copy() for k, v in self.params().items()},
                             background=self.background.copy(), sh_degree=self.sh_degree)

    def normalize_rotations(self) -> None:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations = self.rotations / np.where(norms > 0, norms, 1.0)

    # checkpoint I/O -------------------------------------------------------

    def to_json(self) -> str:
        payload = {
            "format": "evgs-scene",
            "sh_degree": self.sh_degree,
            "background": self.background.tolist(),
            "position": self.positions.tolist(),
            "log_scale": self.log_scales.tolist(),
            "rotation": self.rotations.tolist(),
            "opacity_logit": self.opacity_logits.tolist(),
            "color_coeffs": self.sh.tolist(),
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> GaussianScene:
        d = json.loads(text)
        if d.get("format") != "evgs-scene":
            raise ValueError("not an evgs scene checkpoint")
        n = len(d["position"])
        k = sh_count(int(d["sh_degree"]))
        return cls(
            positions=np.array(d["position"], dtype=float).reshape(n, 3),
            log_scales=np.array(d["log_scale"], dtype=float).reshape(n, 3),
            rotations=np.array(d["rotation"], dtype=float).reshape(n, 4),
            opacity_logits=np.array(d["opacity_logit"], dtype=float).reshape(n),
            sh=np.array(d["color_coeffs"], dtype=float).reshape(n, k, 3),
            background=d["background"],
            sh_degree=int(d["sh_degree"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> GaussianScene:
        with open(path) as fh:
            return cls.from_json(fh.read())


def _nearest_neighbor_distance(points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    out = np.empty(len(queries))
    for start in range(0, len(queries), 256):
        q = queries[start:start + 256]
        d2 = ((q[:, None, :] - points[None, :, :]) ** 2).sum(-1)
        d2[d2 == 0.0] = np.inf  # the query itself
        out[start:start + 256] = np.sqrt(d2.min(axis=1))
    return out


def init_random_cloud(
    n: int,
    bounds,
    rng,
    *,
    sh_degree: int = 0,
    background=(0.0, 0.0, 0.0),
    initial_opacity: float = 0.1,
    subsample: int = 1000,
) -> GaussianScene:
    """Uniform random Gaussians inside the axis-aligned box ``bounds = (lo, hi)``.

    All Gaussians start isotropic with radius equal to the mean nearest-neighbor
    distance (estimated from ``subsample`` query points), identity rotation,
    opacity ``initial_opacity`` and mid-gray color.
    """
    if n <= 0:
        raise ValueError(f"cloud size must be positive, got {n}")
    lo, hi = (np.asarray(b, dtype=float).reshape(3) for b in bounds)
    if np.any(hi <= lo):
        raise ValueError(f"degenerate bounds {lo} .. {hi}")
    rng = np.random.default_rng(rng)
    positions = lo + (hi - lo) * rng.random((n, 3))
    if n > 1:
        idx = rng.choice(n, size=min(n, subsample), replace=False)
        radius = float(np.mean(_nearest_neighbor_distance(positions, positions[idx])))
    else:
        radius = 0.1 * float(np.min(hi - lo))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianScene(
        positions=positions,
        log_scales=np.full((n, 3), np.log(radius)),
        rotations=rotations,
        opacity_logits=np.full(n, float(logit(initial_opacity))),
        sh=np.zeros((n, sh_count(sh_degree), 3)),
        background=background,
        sh_degree=sh_degree,
    )


# rotations and covariance ---------------------------------------------------

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions (w, x, y, z); input is normalized first."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def rotmat_vjp(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw (unnormalized) quaternions given dL/dR, shapes (N,4), (N,3,3)."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    u = q / norm
    w, x, y, z = u.T
    zero = np.zeros_like(w)
    # dR/du[k] for k = w, x, y, z
    d = np.stack([
        np.stack([np.stack([zero, -2 * z, 2 * y], -1),
                  np.stack([2 * z, zero, -2 * x], -1),
                  np.stack([-2 * y, 2 * x, zero], -1)], -2),
        np.stack([np.stack([zero, 2 * y, 2 * z], -1),
                  np.stack([2 * y, -4 * x, -2 * w], -1),
                  np.stack([2 * z, 2 * w, -4 * x], -1)], -2),
        np.stack([np.stack([-4 * y, 2 * x, 2 * w], -1),
                  np.stack([2 * x, zero, 2 * z], -1),
                  np.stack([-2 * w, 2 * z, -4 * y], -1)], -2),
        np.stack([np.stack([-4 * z, -2 * w, 2 * x], -1),
                  np.stack([2 * w, -4 * z, 2 * y], -1),
                  np.stack([2 * x, 2 * y, zero], -1)], -2),
    ], 1)
    g_u = np.einsum("nkij,nij->nk", d, grad_r)
    return (g_u - u * np.sum(u * g_u, axis=1, keepdims=True)) / norm


def build_covariance(log_scale, rotation) -> np.ndarray:
    """Covariance R S S^T R^T for (3,)/(4,) or batched (N,3)/(N,4) inputs."""
    log_scale = np.asarray(log_scale, dtype=float)
    m = quat_to_rotmat(rotation) * np.exp(log_scale)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def covariance_vjp(log_scales, rotations, grad_cov):
    """Gradients (log_scales, rotations) given a symmetric dL/dSigma of shape (N,3,3)."""
    s = np.exp(log_scales)
    r = quat_to_rotmat(rotations)
    m = r * s[:, None, :]
    grad_m = (grad_cov + np.swapaxes(grad_cov, 1, 2)) @ m
    grad_s = np.einsum("nij,nij->nj", r, grad_m)
    grad_r = grad_m * s[:, None, :]
    return grad_s * s, rotmat_vjp(rotations, grad_r)


# spherical harmonics ----------------------------------------------------------

def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values (N, K) at unit directions (N, 3)."""
    x, y, z = np.asarray(dirs, dtype=float).T
    cols = [np.full_like(x, SH_C0)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                 SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        cols += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                 SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                 SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                 SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(cols, axis=1)


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d direction, shape (N, K, 3)."""
    x, y, z = np.asarray(dirs, dtype=float).T
    o = np.zeros_like(x)
    rows = [(o, o, o)]
    if degree >= 1:
        c = SH_C1
        rows += [(o, -c + o, o), (o, o, c + o), (-c + o, o, o)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        c = SH_C2
        rows += [(c[0] * y, c[0] * x, o), (o, c[1] * z, c[1] * y),
                 (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z), (c[3] * z, o, c[3] * x),
                 (2 * c[4] * x, -2 * c[4] * y, o)]
    if degree >= 3:
        c = SH_C3
        rows += [(c[0] * 6 * x * y, c[0] * (3 * xx - 3 * yy), o),
                 (c[1] * y * z, c[1] * x * z, c[1] * x * y),
                 (c[2] * -2 * x * y, c[2] * (4 * zz - xx - 3 * yy), c[2] * 8 * y * z),
                 (c[3] * -6 * x * z, c[3] * -6 * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)),
                 (c[4] * (4 * zz - 3 * xx - yy), c[4] * -2 * x * y, c[4] * 8 * x * z),
                 (c[5] * 2 * x * z, c[5] * -2 * y * z, c[5] * (xx - yy)),
                 (c[6] * (3 * xx - 3 * yy), c[6] * -6 * x * y, o)]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=1)


def sh_to_color(color_coeffs, view_direction, degree: int | None = None) -> np.ndarray:
    """Clamped color SH(coeffs, dir) + 0.5 for one Gaussian ((K,3), (3,)) or a batch."""
    coeffs = np.asarray(color_coeffs, dtype=float)
    dirs = np.asarray(view_direction, dtype=float)
    single = dirs.ndim == 1
    coeffs = coeffs.reshape((-1,) + coeffs.shape[-2:])
    dirs = dirs.reshape(-1, 3)
    if degree is None:
        degree = int(round(np.sqrt(coeffs.shape[1]))) - 1
    raw = np.einsum("nk,nkc->nc", sh_basis(dirs, degree), coeffs[:, :sh_count(degree)]) + 0.5
    color = np.clip(raw, 0.0, 1.0)
    return color[0] if single else color

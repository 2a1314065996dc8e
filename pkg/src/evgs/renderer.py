"""Differentiable splatting of a GaussianScene into an RGB image.

Forward: EWA projection of every Gaussian, one global depth sort (ties broken by
Gaussian index), then per-pixel front-to-back compositing at pixel centers.
Backward: exact vector-Jacobian product of the image with respect to every
Gaussian parameter, reusing the blending records kept by the forward pass.

Each splat only visits pixels inside the ellipse where its alpha can reach the
1/255 skip threshold, so the sparse evaluation is identical to a dense one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _raster
from .camera import DEFAULT_NEAR, Intrinsics, Pose
from .scene import (
    GaussianScene,
    build_covariance,
    covariance_vjp,
    sh_basis,
    sh_basis_jacobian,
    sh_count,
    sigmoid,
)

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
DILATION = 0.3
EARLY_STOP_T = 1e-4


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class RenderSettings:
    near: float = DEFAULT_NEAR
    early_termination: bool = False


@dataclass
class Splat2D:
    """Projected Gaussians that survived culling (all arrays share the first axis)."""

    mean2d: np.ndarray      # (M, 2) pixels
    cov2d: np.ndarray       # (M, 2, 2) after dilation
    inv_cov2d: np.ndarray   # (M, 2, 2)
    depth: np.ndarray       # (M,)
    base_opacity: np.ndarray
    color: np.ndarray       # (M, 3) clamped
    source: np.ndarray      # (M,) index into the scene
    # intermediates for the backward pass
    cam: np.ndarray
    jac: np.ndarray         # (M, 2, 3)
    cov3d: np.ndarray
    raw_color: np.ndarray
    view_dir: np.ndarray
    view_dist: np.ndarray

    def __len__(self) -> int:
        return len(self.source)


def project_gaussians(scene: GaussianScene, pose: Pose, intr: Intrinsics,
                      near: float = DEFAULT_NEAR) -> Splat2D:
    w = pose.matrix
    cam = scene.positions @ w.T + pose.translation
    x, y, z = cam.T
    keep = z > near
    zs = np.where(keep, z, 1.0)
    n = len(scene)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = intr.fx / zs
    jac[:, 0, 2] = -intr.fx * x / zs ** 2
    jac[:, 1, 1] = intr.fy / zs
    jac[:, 1, 2] = -intr.fy * y / zs ** 2
    cov3d = build_covariance(scene.log_scales, scene.rotations)
    t = jac @ w
    cov2d = t @ cov3d @ np.swapaxes(t, 1, 2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    mean2d = np.stack([intr.fx * x / zs + intr.cx, intr.fy * y / zs + intr.cy], axis=1)
    sx = 3.0 * np.sqrt(cov2d[:, 0, 0])
    sy = 3.0 * np.sqrt(cov2d[:, 1, 1])
    keep &= (mean2d[:, 0] > -sx) & (mean2d[:, 0] < intr.width + sx)
    keep &= (mean2d[:, 1] > -sy) & (mean2d[:, 1] < intr.height + sy)
    idx = np.flatnonzero(keep)

    cov2d = cov2d[idx]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    inv = np.empty_like(cov2d)
    inv[:, 0, 0] = cov2d[:, 1, 1] / det
    inv[:, 1, 1] = cov2d[:, 0, 0] / det
    inv[:, 0, 1] = inv[:, 1, 0] = -cov2d[:, 0, 1] / det

    offset = scene.positions[idx] - pose.camera_center
    dist = np.linalg.norm(offset, axis=1)
    dirs = offset / dist[:, None]
    k = sh_count(scene.sh_degree)
    raw = np.einsum("nk,nkc->nc", sh_basis(dirs, scene.sh_degree), scene.sh[idx, :k]) + 0.5
    return Splat2D(
        mean2d=mean2d[idx], cov2d=cov2d, inv_cov2d=inv, depth=z[idx],
        base_opacity=sigmoid(scene.opacity_logits[idx]), color=np.clip(raw, 0.0, 1.0),
        source=idx, cam=cam[idx], jac=jac[idx], cov3d=cov3d[idx], raw_color=raw,
        view_dir=dirs, view_dist=dist,
    )


def project_gaussian(gaussian, pose: Pose, intr: Intrinsics, near: float = DEFAULT_NEAR,
                     sh_degree: int = 0):
    """Project one Gaussian; returns a single-row Splat2D, or None when culled."""
    scene = GaussianScene.from_gaussians([gaussian], sh_degree=sh_degree)
    splats = project_gaussians(scene, pose, intr, near)
    return splats if len(splats) else None


@dataclass
class RenderResult:
    """Rendered image plus the blending records the backward pass needs.

    Records are flat arrays over contributing (pixel, splat) entries, grouped by
    pixel and front to back within each pixel.
    """

    image: np.ndarray        # (H, W, 3)
    splats: Splat2D
    order: np.ndarray        # splat rows sorted front to back
    pixel: np.ndarray        # flat pixel index per entry
    entry_splat: np.ndarray  # splat row per entry
    alpha: np.ndarray        # alpha after the 0.99 clamp
    alpha_clamped: np.ndarray
    trans: np.ndarray        # transmittance in front of each entry
    final_trans: np.ndarray  # (P,) transmittance left for the background
    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray        # exp(-q/2) per entry
    background: np.ndarray


def render(scene: GaussianScene, pose: Pose, intr: Intrinsics,
           settings: RenderSettings = RenderSettings()) -> RenderResult:
    splats = project_gaussians(scene, pose, intr, settings.near)
    order = np.lexsort((splats.source, splats.depth))
    image, pix, row, dx, dy, g, alpha, clamped, trans, final, keep = _raster.rasterize(
        splats.mean2d[order], splats.inv_cov2d[order], splats.base_opacity[order],
        splats.color[order], scene.background, intr.width, intr.height,
        ALPHA_MIN, ALPHA_MAX, EARLY_STOP_T if settings.early_termination else 0.0,
    )
    if not keep.all():
        pix, row, dx, dy, g, alpha, clamped, trans = (
            v[keep] for v in (pix, row, dx, dy, g, alpha, clamped, trans))
    return RenderResult(
        image=image.reshape(intr.height, intr.width, 3), splats=splats, order=order,
        pixel=pix, entry_splat=order[row], alpha=alpha, alpha_clamped=clamped,
        trans=trans, final_trans=final, dx=dx, dy=dy, gauss=g,
        background=scene.background.copy(),
    )


@dataclass
class ParamGradients:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    mean2d: np.ndarray        # dL/d projected mean (pixels), per Gaussian
    visible: np.ndarray       # bool, Gaussian projected inside the view

    @classmethod
    def zeros_like(cls, scene: GaussianScene) -> ParamGradients:
        n = len(scene)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros_like(scene.sh), np.zeros((n, 2)), np.zeros(n, dtype=bool))

    def params(self) -> dict[str, np.ndarray]:
        return {"positions": self.positions, "log_scales": self.log_scales,
                "rotations": self.rotations, "opacity_logits": self.opacity_logits,
                "sh": self.sh}

    def __add__(self, other: ParamGradients) -> ParamGradients:
        return ParamGradients(
            self.positions + other.positions, self.log_scales + other.log_scales,
            self.rotations + other.rotations, self.opacity_logits + other.opacity_logits,
            self.sh + other.sh, self.mean2d + other.mean2d,
            self.visible | other.visible,
        )

    def scaled(self, s: float) -> ParamGradients:
        return ParamGradients(self.positions * s, self.log_scales * s, self.rotations * s,
                              self.opacity_logits * s, self.sh * s, self.mean2d * s,
                              self.visible.copy())

    def check_finite(self) -> None:
        for name, g in self.params().items():
            bad = ~np.isfinite(g.reshape(len(g), -1)).all(axis=1)
            if bad.any():
                raise NumericalError(f"non-finite {name} gradient for Gaussian {np.flatnonzero(bad)[0]}")


def render_backward(scene: GaussianScene, pose: Pose, intr: Intrinsics, result: RenderResult,
                    grad_image: np.ndarray) -> ParamGradients:
    """Gradients of ``sum(grad_image * image)`` with respect to all scene parameters."""
    grad_image = np.asarray(grad_image, dtype=float)
    if grad_image.shape != result.image.shape:
        raise ValueError(f"gradient shape {grad_image.shape} != image shape {result.image.shape}")
    sp = result.splats
    m = len(sp)
    gp = grad_image.reshape(-1, 3)
    g_opacity, g_mean2d, g_conic, g_color = _raster.composite_backward(
        np.ascontiguousarray(gp), result.pixel, result.entry_splat, result.alpha,
        result.alpha_clamped, result.trans, result.final_trans, result.gauss,
        result.dx, result.dy, sp.base_opacity, sp.inv_cov2d, sp.color, result.background, m)
    g_inv = np.empty((m, 2, 2))
    g_inv[:, 0, 0] = g_conic[:, 0]
    g_inv[:, 0, 1] = g_inv[:, 1, 0] = g_conic[:, 1]
    g_inv[:, 1, 1] = g_conic[:, 2]

    # inverse -> 2D covariance -> 3D covariance and Jacobian
    a = sp.inv_cov2d
    g_cov2d = -a @ g_inv @ a
    wmat = pose.matrix
    t = sp.jac @ wmat
    g_cov3d = np.swapaxes(t, 1, 2) @ g_cov2d @ t
    g_t = 2.0 * g_cov2d @ t @ sp.cov3d
    g_j = g_t @ wmat.T

    x, y, z = sp.cam.T
    fx, fy = intr.fx, intr.fy
    g_cam = np.einsum("nij,ni->nj", sp.jac, g_mean2d)
    g_cam[:, 0] += -fx / z ** 2 * g_j[:, 0, 2]
    g_cam[:, 1] += -fy / z ** 2 * g_j[:, 1, 2]
    g_cam[:, 2] += (-fx / z ** 2 * g_j[:, 0, 0] + 2 * fx * x / z ** 3 * g_j[:, 0, 2]
                    - fy / z ** 2 * g_j[:, 1, 1] + 2 * fy * y / z ** 3 * g_j[:, 1, 2])
    g_pos = g_cam @ wmat

    # color: clamp, SH basis and view direction
    raw = sp.raw_color
    g_raw = np.where((raw >= 0.0) & (raw <= 1.0), g_color, 0.0)
    deg = scene.sh_degree
    basis = sh_basis(sp.view_dir, deg)
    g_sh = basis[:, :, None] * g_raw[:, None, :]
    if deg > 0:
        coeffs = scene.sh[sp.source]
        g_dir = np.einsum("nkc,nc,nkj->nj", coeffs, g_raw, sh_basis_jacobian(sp.view_dir, deg))
        d = sp.view_dir
        g_pos += (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / sp.view_dist[:, None]

    g_ls, g_rot = covariance_vjp(scene.log_scales[sp.source], scene.rotations[sp.source], g_cov3d)
    sig = sp.base_opacity

    out = ParamGradients.zeros_like(scene)
    out.positions[sp.source] = g_pos
    out.log_scales[sp.source] = g_ls
    out.rotations[sp.source] = g_rot
    out.opacity_logits[sp.source] = g_opacity * sig * (1.0 - sig)
    out.sh[sp.source] = g_sh
    out.mean2d[sp.source] = g_mean2d
    out.visible[sp.source] = True
    out.check_finite()
    return out


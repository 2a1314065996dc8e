"""Training losses with analytic image gradients, and evaluation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
ALIGN_EPS = 1e-3
PSNR_CAP = 100.0


@dataclass(frozen=True)
class LossWeights:
    lambda_event: float = 0.02
    lambda_reg: float = 0.002
    log_epsilon: float = 1e-3

    def __post_init__(self) -> None:
        for name in ("lambda_event", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not self.log_epsilon > 0:
            raise ValueError("log_epsilon must be positive")


@dataclass
class LossReport:
    iteration: int
    event_loss: float = 0.0
    reg_loss: float = 0.0
    prior_l1: float = 0.0
    total: float = 0.0

    def to_log_record(self) -> dict:
        return {"iter": self.iteration, "event": self.event_loss, "reg": self.reg_loss,
                "prior_l1": self.prior_l1, "total": self.total}

    def as_dict(self) -> dict:
        return asdict(self)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    return img @ LUMA if img.ndim >= 3 and img.shape[-1] == 3 else img


# event supervision ------------------------------------------------------------

def _event_residual(i1, i2, frame, eps, mode):
    i1 = np.asarray(i1, dtype=float)
    i2 = np.asarray(i2, dtype=float)
    _check_same_shape(i1, i2)
    e = np.asarray(getattr(frame, "values", frame), dtype=float)
    if mode == "luminance":
        l1, l2 = luminance(i1), luminance(i2)
    elif mode == "rgb":
        l1, l2 = i1, i2
        e = e[..., None] if i1.ndim == 3 else e
    else:
        raise ValueError(f"unknown event loss mode {mode!r}")
    if l1.shape[:2] != e.shape[:2]:
        raise ValueError(f"image size {l1.shape[:2]} != event frame size {e.shape[:2]}")
    resid = np.log(l2 + eps) - np.log(l1 + eps) - e
    return l1, l2, resid


def event_loss(i_t1, i_t2, frame, log_epsilon: float = 1e-3, mode: str = "luminance") -> float:
    """Mean squared mismatch between the rendered log-intensity change and the event frame.

    Positive events mean brightening from ``t1`` to ``t2``, so the residual is
    ``log(I_t2 + eps) - log(I_t1 + eps) - E``.
    """
    _, _, r = _event_residual(i_t1, i_t2, frame, log_epsilon, mode)
    return float(np.mean(r * r))


def event_loss_grad(i_t1, i_t2, frame, log_epsilon: float = 1e-3, mode: str = "luminance"):
    """``(loss, dL/dI_t1, dL/dI_t2)``; the gradients have the images' shape."""
    l1, l2, r = _event_residual(i_t1, i_t2, frame, log_epsilon, mode)
    k = 2.0 * r / r.size
    g1 = -k / (l1 + log_epsilon)
    g2 = k / (l2 + log_epsilon)
    if mode == "luminance" and np.ndim(i_t1) == 3:
        g1 = g1[..., None] * LUMA
        g2 = g2[..., None] * LUMA
    return float(np.mean(r * r)), g1, g2


# prior supervision --------------------------------------------------------------

def prior_l1_loss(i_prior, i_render) -> float:
    a = np.asarray(i_prior, dtype=float)
    b = np.asarray(i_render, dtype=float)
    _check_same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


def prior_l1_grad(i_prior, i_render):
    """``(loss, dL/dI_render)``."""
    a = np.asarray(i_prior, dtype=float)
    b = np.asarray(i_render, dtype=float)
    _check_same_shape(a, b)
    d = b - a
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


def _gauss_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


_TAPS = _gauss_taps()


def _blur(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian window, 'valid' region only. x: (H, W, C)."""
    y = sliding_window_view(x, SSIM_WINDOW, axis=0) @ _TAPS
    return sliding_window_view(y, SSIM_WINDOW, axis=1) @ _TAPS


def _blur_adjoint(y: np.ndarray) -> np.ndarray:
    pad = SSIM_WINDOW - 1
    return _blur(np.pad(y, ((pad, pad), (pad, pad), (0, 0))))


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    return img[..., None] if img.ndim == 2 else img


def _ssim_terms(a, b):
    a, b = _as_hwc(a), _as_hwc(b)
    _check_same_shape(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    mu_a, mu_b = _blur(a), _blur(b)
    var_a = _blur(a * a) - mu_a ** 2
    var_b = _blur(b * b) - mu_b ** 2
    cov = _blur(a * b) - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + SSIM_C1
    n2 = 2 * cov + SSIM_C2
    d1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    d2 = var_a + var_b + SSIM_C2
    return a, b, mu_a, mu_b, n1, n2, d1, d2


def ssim(a, b) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, data range 1) averaged over channels."""
    *_, n1, n2, d1, d2 = _ssim_terms(a, b)
    return float(np.mean(n1 * n2 / (d1 * d2)))


def ssim_grad(a, b):
    """``(ssim(a, b), d ssim / d b)``."""
    a, b, mu_a, mu_b, n1, n2, d1, d2 = _ssim_terms(a, b)
    smap = n1 * n2 / (d1 * d2)
    scale = 1.0 / smap.size
    d_mu_b = (2 * mu_a * n2 / (d1 * d2) - smap * 2 * mu_b / d1) * scale
    d_var_b = -smap / d2 * scale
    d_cov = 2 * n1 / (d1 * d2) * scale
    # var_b = E[b^2] - mu_b^2, cov = E[ab] - mu_a mu_b
    g_mu = d_mu_b - 2 * mu_b * d_var_b - mu_a * d_cov
    grad = _blur_adjoint(g_mu) + 2 * b * _blur_adjoint(d_var_b) + a * _blur_adjoint(d_cov)
    return float(np.mean(smap)), grad


def reg_loss(i_prior, i_render) -> float:
    return 1.0 - ssim(i_prior, i_render)


def reg_loss_grad(i_prior, i_render):
    """``(1 - ssim, dL/dI_render)`` with the gradient shaped like ``i_render``."""
    value, g = ssim_grad(i_prior, i_render)
    return 1.0 - value, -g.reshape(np.shape(i_render))


def total_loss(event_value: float, reg_value: float, weights: LossWeights = LossWeights()) -> float:
    return weights.lambda_event * event_value + weights.lambda_reg * reg_value


# metrics ------------------------------------------------------------------------

def psnr(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


@dataclass
class Alignment:
    scale: np.ndarray      # per channel
    offset: np.ndarray
    degenerate: np.ndarray  # per channel: prediction was constant


def log_affine_align(pred, ref, eps: float = ALIGN_EPS, return_fit: bool = False):
    """Fit ``a * log(pred + eps) + b ~ log(ref + eps)`` per channel and map ``pred`` through it.

    A constant prediction channel cannot be scaled; it is replaced by the best
    constant and marked degenerate in the returned fit.
    """
    p, r = _as_hwc(pred), _as_hwc(ref)
    _check_same_shape(p, r)
    if np.any(p < 0) or np.any(r < 0):
        raise ValueError("log-affine alignment needs nonnegative images")
    x = np.log(p + eps).reshape(-1, p.shape[-1])
    y = np.log(r + eps).reshape(-1, r.shape[-1])
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    var = np.sum(xc * xc, axis=0)
    degenerate = var <= 1e-24 * len(x)
    scale = np.where(degenerate, 0.0, np.sum(xc * yc, axis=0) / np.where(degenerate, 1.0, var))
    offset = y.mean(axis=0) - scale * x.mean(axis=0)
    out = np.clip(np.exp(scale * x + offset) - eps, 0.0, 1.0).reshape(p.shape)
    out = out.reshape(np.shape(pred))
    if return_fit:
        return out, Alignment(scale, offset, degenerate)
    return out


def aligned_metrics(pred, ref) -> dict:
    aligned, fit = log_affine_align(pred, ref, return_fit=True)
    return {"psnr": psnr(aligned, ref), "ssim": ssim(aligned, ref),
            "degenerate_fit": bool(fit.degenerate.any())}

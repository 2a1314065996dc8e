"""PNG and raw float32 image files."""

from __future__ import annotations

import numpy as np
from PIL import Image as PILImage


def to_uint8(img: np.ndarray) -> np.ndarray:
    # round half up, not numpy's round-half-even
    return np.floor(np.clip(np.asarray(img, dtype=float), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    PILImage.fromarray(to_uint8(img)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read a PNG as float RGB in [0, 1]; grayscale is expanded to three channels."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    arr = arr.astype(float) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return arr


def write_raw(path, img: np.ndarray) -> None:
    """Row-major little-endian float32 dump."""
    np.ascontiguousarray(img, dtype="<f4").tofile(path)


def read_raw(path, shape) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(shape).astype(float)

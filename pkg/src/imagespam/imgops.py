"""Low-level pixel operations shared by ingestion and augmentation."""

from __future__ import annotations

import numpy as np


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an H x W or H x W x C array with bilinear interpolation.

    Sampling uses half-pixel centers (src = (dst + 0.5) * scale - 0.5) with
    edge clamping, so a same-size resize reproduces the input exactly.
    Computation and result are float64; callers quantize as needed.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid output size {out_h}x{out_w}")
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"expected 2-D or 3-D image, got shape {image.shape}")
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("empty input image")

    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    fy = ys - y0f
    fx = xs - x0f
    y0 = np.clip(y0f, 0, h - 1).astype(np.intp)
    y1 = np.clip(y0f + 1, 0, h - 1).astype(np.intp)
    x0 = np.clip(x0f, 0, w - 1).astype(np.intp)
    x1 = np.clip(x0f + 1, 0, w - 1).astype(np.intp)

    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[np.ix_(y0, x0)] * (1.0 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1.0 - fx) + img[np.ix_(y1, x1)] * fx
    out = top * (1.0 - fy) + bot * fy
    return out[:, :, 0] if squeeze else out


def resize_uint8(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize quantized back to uint8 (round to nearest, clipped)."""
    out = bilinear_resize(image, out_h, out_w)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)
